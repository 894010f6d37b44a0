#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

namespace ebmreg {

// Central-difference check of an analytic gradient. `f` must be a pure
// function of theta (same randomness, same data on every call). Returns
// max_p |g_ad[p] - g_fd[p]| / max(|g_ad[p]|, |g_fd[p]|, 1e-4). The 1e-4
// floor keeps cancellation noise in the differences (~1e-11 for eps = 1e-5
// and O(1) values) from dominating entries whose true gradient is zero;
// callers should confirm the gradient is not all-zero or the check is
// vacuous. theta is restored exactly (each entry gets its original bits
// back).
template <class F>
double finite_diff_check(F&& f, std::span<double> theta, std::span<const double> grad_ad,
                         double eps) {
  double worst = 0.0;
  for (std::size_t p = 0; p < theta.size(); ++p) {
    const double saved = theta[p];
    theta[p] = saved + eps;
    const double hi = f(std::span<const double>(theta));
    theta[p] = saved - eps;
    const double lo = f(std::span<const double>(theta));
    theta[p] = saved;
    const double fd = (hi - lo) / (2.0 * eps);
    const double denom = std::max({std::abs(grad_ad[p]), std::abs(fd), 1e-4});
    const double rel = std::abs(grad_ad[p] - fd) / denom;
    if (rel > worst) worst = rel;
  }
  return worst;
}

}  // namespace ebmreg
