// Mini-batch training loop with an ADAM optimizer.
//
// Randomness is split into named streams so runs are reproducible end to end:
// batch order is keyed by (seed, epoch) and each batch's loss sampling by
// (seed, epoch, batch). A non-finite loss, a diverged sampling chain, or a
// non-finite gradient marks the run failed and returns a record describing
// where — failures are data for the calling protocol, not crashes.

#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebmreg/checkpoint.hpp"
#include "ebmreg/datasets.hpp"
#include "ebmreg/losses.hpp"
#include "ebmreg/model.hpp"
#include "ebmreg/rng.hpp"
#include "ebmreg/tape.hpp"

namespace ebmreg {

class OptimizerError : public std::runtime_error {
 public:
  OptimizerError(const std::string& what, std::size_t param_idx)
      : std::runtime_error(what), param(param_idx) {}
  std::size_t param = 0;
};

struct TrainConfig {
  std::size_t epochs = 75;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;
};

inline void validate(const TrainConfig& cfg) {
  if (cfg.epochs == 0) throw ConfigError("epochs must be >= 1");
  if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(cfg.lr > 0.0) || !std::isfinite(cfg.lr))
    throw ConfigError("lr must be positive and finite");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0))
    throw ConfigError("adam_beta1 must lie in [0, 1)");
  if (!(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0))
    throw ConfigError("adam_beta2 must lie in [0, 1)");
  if (!(cfg.adam_eps > 0.0) || !std::isfinite(cfg.adam_eps))
    throw ConfigError("adam_eps must be positive and finite");
}

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::uint64_t t = 0;
  explicit AdamState(std::size_t params) : m(params, 0.0), v(params, 0.0) {}
};

// One ADAM update with bias correction:
//   m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2;
//   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps).
// Validates every gradient entry before touching any state, so a throw
// leaves theta and the moments exactly as they were.
inline void adam_step(std::span<double> theta, std::span<const double> grad, AdamState& st,
                      const TrainConfig& cfg) {
  if (theta.size() != grad.size() || theta.size() != st.m.size() ||
      theta.size() != st.v.size())
    throw ConfigError("adam_step: theta, grad, and state sizes must agree");
  for (std::size_t p = 0; p < grad.size(); ++p)
    if (!std::isfinite(grad[p]))
      throw OptimizerError("non-finite gradient at parameter " + std::to_string(p), p);
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(st.t));
  for (std::size_t p = 0; p < theta.size(); ++p) {
    const double g = grad[p];
    st.m[p] = cfg.adam_beta1 * st.m[p] + (1.0 - cfg.adam_beta1) * g;
    st.v[p] = cfg.adam_beta2 * st.v[p] + (1.0 - cfg.adam_beta2) * (g * g);
    const double mhat = st.m[p] / bc1;
    const double vhat = st.v[p] / bc2;
    theta[p] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
  }
}

struct RunRecord {
  bool failed = false;
  std::string failure_reason;   // empty on success
  std::size_t failed_epoch = 0;  // valid only when failed
  std::size_t failed_batch = 0;  // valid only when failed
  std::vector<double> loss_curve;             // per-epoch mean per-example loss
  std::vector<double> wall_seconds_per_epoch;  // completed epochs only
  std::size_t steps = 0;                       // optimizer steps applied
  Checkpoint checkpoint;  // final parameters (at the failure point for failed runs)
  std::uint64_t seed = 0;
  MethodConfig method = NceConfig{};  // snapshot of the objective trained with
};

// Runs epochs * ceil(N / batch_size) optimizer steps on `model` in place.
// The last partial batch is kept. Wall-clock timings are recorded per
// completed epoch and are the only nondeterministic fields of the result.
inline RunRecord train(EbmModel& model, const RegressionSet& data, const MethodConfig& method,
                       const TrainConfig& cfg) {
  validate(cfg);
  validate(method);
  if (data.x.size() != data.y.size()) throw ConfigError("training data x/y size mismatch");
  if (data.size() == 0) throw ConfigError("training data must be nonempty");

  RunRecord rec;
  rec.seed = cfg.seed;
  rec.method = method;

  AdamState st(model.param_count());
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n_batches = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::vector<double> grad;
  Batch batch;
  Tape tape(model.theta());  // one scratch tape for the whole run, reset per batch

  auto fail = [&](std::size_t epoch, std::size_t bi, const std::string& why) {
    rec.failed = true;
    rec.failed_epoch = epoch;
    rec.failed_batch = bi;
    rec.failure_reason = why;
  };

  for (std::size_t e = 0; e < cfg.epochs && !rec.failed; ++e) {
    const auto tick = std::chrono::steady_clock::now();
    if (cfg.shuffle) {
      Rng srng(stream_key(kRoleShuffle, cfg.seed, e));
      shuffle(order, srng);
    }
    double epoch_example_loss = 0.0;
    for (std::size_t bi = 0; bi < n_batches; ++bi) {
      const std::size_t lo = bi * cfg.batch_size;
      const std::size_t hi = std::min(lo + cfg.batch_size, data.size());
      batch.x.clear();
      batch.y.clear();
      for (std::size_t k = lo; k < hi; ++k) {
        batch.x.push_back(data.x[order[k]]);
        batch.y.push_back(data.y[order[k]]);
      }
      Rng loss_rng(stream_key(kRoleLoss, cfg.seed, e, bi));
      LossBreakdown bk;
      try {
        bk = loss_and_grad(tape, model, batch, method, loss_rng, &grad);
      } catch (const ChainError& err) {
        fail(e, bi, err.what());
        break;
      } catch (const TapeError& err) {
        fail(e, bi, err.what());
        break;
      }
      if (!std::isfinite(bk.total)) {
        fail(e, bi, "non-finite loss (" + std::to_string(bk.total) + ")");
        break;
      }
      try {
        adam_step(model.theta(), grad, st, cfg);
      } catch (const OptimizerError& err) {
        fail(e, bi, err.what());
        break;
      }
      rec.steps += 1;
      epoch_example_loss += bk.total * static_cast<double>(batch.x.size());
    }
    if (!rec.failed) {
      rec.loss_curve.push_back(epoch_example_loss / static_cast<double>(data.size()));
      const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - tick;
      rec.wall_seconds_per_epoch.push_back(dt.count());
    }
  }

  rec.checkpoint = Checkpoint::of_model(model);
  return rec;
}

}  // namespace ebmreg
