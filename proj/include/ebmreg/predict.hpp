// Gradient-ascent refinement of a point prediction.
//
// Starting from an initial estimate, repeatedly propose a step along the
// energy gradient in y; accept the step only if the energy strictly
// increases, otherwise shrink the step length.  Accepted energies are
// therefore non-decreasing by construction.

#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "ebmreg/errors.hpp"
#include "ebmreg/jet.hpp"
#include "ebmreg/model.hpp"

namespace ebmreg {

class PredictError : public std::runtime_error {
 public:
  explicit PredictError(const std::string& what) : std::runtime_error(what) {}
};

struct PredictorConfig {
  std::size_t iterations = 10;
  double lambda = 0.1;  // initial step length
  double eta = 0.5;     // step-length decay on rejection
};

inline void validate(const PredictorConfig& cfg) {
  if (cfg.iterations < 1) throw ConfigError("predictor requires at least one iteration");
  if (!(cfg.lambda > 0.0) || !std::isfinite(cfg.lambda)) {
    throw ConfigError("predictor step length must be positive and finite");
  }
  if (!(cfg.eta > 0.0) || !(cfg.eta < 1.0)) {
    throw ConfigError("predictor decay must lie strictly between 0 and 1");
  }
}

// energy(y) must return the energy value and its derivative with respect to y.
// If accepted_f is non-null, the energy value after every accepted step is
// appended to it (useful for asserting monotone acceptance).
template <class EnergyFn>
  requires std::is_invocable_r_v<Dual, EnergyFn&, double>
double predict(EnergyFn&& energy, double y_hat, const PredictorConfig& cfg,
               std::vector<double>* accepted_f = nullptr) {
  validate(cfg);
  double y = y_hat;
  Dual cur = energy(y);
  if (!std::isfinite(cur.v) || !std::isfinite(cur.d1)) {
    throw PredictError("non-finite energy or gradient at the initial estimate");
  }
  double lam = cfg.lambda;
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const double proposal = y + lam * cur.d1;
    const Dual cand = energy(proposal);
    if (!std::isfinite(cand.v) || !std::isfinite(cand.d1)) {
      throw PredictError("non-finite energy or gradient at iteration " + std::to_string(t));
    }
    if (cand.v > cur.v) {
      y = proposal;
      cur = cand;
      if (accepted_f != nullptr) accepted_f->push_back(cand.v);
    } else {
      lam *= cfg.eta;
    }
  }
  return y;
}

// Refines a prediction for the learned model at input x_star.
inline double predict(const EbmModel& model, double x_star, double y_hat,
                      const PredictorConfig& cfg, std::vector<double>* accepted_f = nullptr) {
  Workspace ws;
  const auto xf = model.x_features(x_star);
  return predict(
      [&](double y) { return model.forward_dual_with_features(xf, Dual{y, 1.0}, ws); }, y_hat,
      cfg, accepted_f);
}

}  // namespace ebmreg
