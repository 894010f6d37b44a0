#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

#include "ebmreg/rng.hpp"

namespace ebmreg {

struct DistributionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr double kLogTwoPi = 1.8378770664093454835606594728112353;  // log(2 pi)

// log N(y; mu, sigma^2)
inline double gaussian_logpdf(double y, double mu, double sigma) {
  const double z = (y - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * kLogTwoPi;
}

// standard normal CDF
inline double gaussian_cdf(double y, double mu, double sigma) {
  return 0.5 * std::erfc(-(y - mu) / (sigma * std::numbers::sqrt2));
}

// Finite mixture of 1D Gaussians: sum_k w_k N(y; mean_k, std_k^2).
class GaussianMixture1D {
 public:
  GaussianMixture1D(std::vector<double> weights, std::vector<double> means,
                    std::vector<double> stds)
      : w_(std::move(weights)), mu_(std::move(means)), sd_(std::move(stds)) {
    if (w_.empty() || w_.size() != mu_.size() || w_.size() != sd_.size())
      throw DistributionError("mixture: component lists must be equal-sized and non-empty");
    double total = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k) {
      if (!(w_[k] > 0.0)) throw DistributionError("mixture: weights must be positive");
      if (!(sd_[k] > 0.0)) throw DistributionError("mixture: stds must be positive");
      total += w_[k];
    }
    if (std::abs(total - 1.0) > 1e-12)
      throw DistributionError("mixture: weights must sum to 1");
  }

  std::size_t components() const { return w_.size(); }
  std::span<const double> weights() const { return w_; }
  std::span<const double> means() const { return mu_; }
  std::span<const double> stds() const { return sd_; }

  // log density with every component mean shifted by `center` (proposal and
  // noise distributions recenter a base mixture on each data point)
  double logpdf(double y, double center = 0.0) const {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < w_.size(); ++k)
      mx = std::max(mx, std::log(w_[k]) + gaussian_logpdf(y, center + mu_[k], sd_[k]));
    double acc = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k)
      acc += std::exp(std::log(w_[k]) + gaussian_logpdf(y, center + mu_[k], sd_[k]) - mx);
    return mx + std::log(acc);
  }

  // Row variant of logpdf(). Produces the exact per-lane values of the scalar
  // path; the per-component constants (shifted mean, log weight, log std) are
  // hoisted out of the lane loop, which the scalar path cannot do because
  // std::log may set errno.
  void logpdf_rows(std::span<const double> y, double center, std::span<double> out) const {
    if (y.size() != out.size())
      throw DistributionError("logpdf_rows: input and output sizes differ");
    const std::size_t kc = w_.size();
    std::vector<double> cmu(kc), lw(kc), ls(kc), term(kc);
    for (std::size_t k = 0; k < kc; ++k) {
      cmu[k] = center + mu_[k];
      lw[k] = std::log(w_[k]);
      ls[k] = std::log(sd_[k]);
    }
    const double half_l2p = 0.5 * kLogTwoPi;
    for (std::size_t i = 0; i < y.size(); ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < kc; ++k) {
        const double z = (y[i] - cmu[k]) / sd_[k];
        term[k] = lw[k] + (-0.5 * z * z - ls[k] - half_l2p);
        mx = std::max(mx, term[k]);
      }
      double acc = 0.0;
      for (std::size_t k = 0; k < kc; ++k) acc += std::exp(term[k] - mx);
      out[i] = mx + std::log(acc);
    }
  }

  double pdf(double y, double center = 0.0) const { return std::exp(logpdf(y, center)); }

  double cdf(double y, double center = 0.0) const {
    double acc = 0.0;
    for (std::size_t k = 0; k < w_.size(); ++k)
      acc += w_[k] * gaussian_cdf(y, center + mu_[k], sd_[k]);
    return acc;
  }

  // component choice by one uniform word, then one normal draw (two words):
  // exactly three engine words per sample
  double sample(Rng& rng, double center = 0.0) const {
    const double u = rng.uniform();
    std::size_t k = 0;
    double acc = w_[0];
    while (k + 1 < w_.size() && u >= acc) acc += w_[++k];
    return center + mu_[k] + sd_[k] * rng.normal();
  }

 private:
  std::vector<double> w_, mu_, sd_;
};

// log LogNormal(y; mu, sigma^2) for y > 0, -inf otherwise
inline double lognormal_logpdf(double y, double mu, double sigma) {
  if (!(y > 0.0)) return -std::numeric_limits<double>::infinity();
  const double ly = std::log(y);
  const double z = (ly - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - ly - 0.5 * kLogTwoPi;
}

inline double lognormal_cdf(double y, double mu, double sigma) {
  if (!(y > 0.0)) return 0.0;
  return gaussian_cdf(std::log(y), mu, sigma);
}

inline double lognormal_sample(Rng& rng, double mu, double sigma) {
  return std::exp(mu + sigma * rng.normal());
}

}  // namespace ebmreg
