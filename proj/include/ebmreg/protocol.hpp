// Best-k-of-n aggregation for repeated training runs.
//
// A benchmark cell trains n independent models and reports the mean metric of
// the k best runs.  Failed runs surface as non-finite metric values; they are
// kept in the per-run list (so failure counts are auditable) but excluded from
// the best-k mean.  Per-run seeds are derived deterministically.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ebmreg/errors.hpp"
#include "ebmreg/rng.hpp"

namespace ebmreg {

class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

struct ProtocolResult {
  std::vector<double> kls;  // one metric per run, in run order; may hold inf/nan
  double best_k_mean = 0.0;
  std::size_t failures = 0;  // runs with a non-finite metric
};

// Deterministic seed for run `run_index` of a protocol anchored at `base_seed`.
inline std::uint64_t protocol_run_seed(std::uint64_t base_seed, std::uint64_t run_index) {
  return stream_key(kRoleRun, base_seed, run_index);
}

// run_metric(i) returns the metric of run i (non-finite for a failed run).
template <class RunFn>
  requires std::is_invocable_r_v<double, RunFn&, std::size_t>
ProtocolResult best_k_of(RunFn&& run_metric, std::size_t runs, std::size_t k) {
  if (k < 1) throw ConfigError("best-k protocol requires k >= 1");
  if (runs < k) throw ConfigError("best-k protocol requires at least k runs");
  ProtocolResult r;
  r.kls.reserve(runs);
  std::vector<double> finite;
  finite.reserve(runs);
  for (std::size_t i = 0; i < runs; ++i) {
    const double v = run_metric(i);
    r.kls.push_back(v);
    if (std::isfinite(v)) {
      finite.push_back(v);
    } else {
      ++r.failures;
    }
  }
  if (finite.size() < k) {
    throw ProtocolError("only " + std::to_string(finite.size()) + " runs finished with a finite metric, need " +
                        std::to_string(k));
  }
  std::sort(finite.begin(), finite.end());
  double acc = 0.0;
  for (std::size_t i = 0; i < k; ++i) acc += finite[i];
  r.best_k_mean = acc / static_cast<double>(k);
  return r;
}

}  // namespace ebmreg
