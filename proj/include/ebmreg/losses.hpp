// Training objectives for conditional energy-based regression models.
//
// Each objective is built in two stages so tests and tools can intervene
// between them:
//   1. a draw function consumes the RNG stream and returns plain doubles
//      (proposal samples, noise rows, corrupted targets, or chain states);
//   2. a record function replays those numbers onto a Tape as constants and
//      assembles the scalar loss, so one backward() call yields d(loss)/d(theta).
//
// Record functions accept any energy recorder (see EnergyRecorder below), not
// just the production model, which keeps closed-form stub oracles cheap.

#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "ebmreg/errors.hpp"
#include "ebmreg/mixture.hpp"
#include "ebmreg/model.hpp"
#include "ebmreg/rng.hpp"
#include "ebmreg/tape.hpp"

namespace ebmreg {

// ---- errors ----

// A sampling chain left the finite range. `chain` is the flat chain index
// (example-major), `step` the update that produced the non-finite state.
class ChainError : public std::runtime_error {
 public:
  ChainError(const std::string& what, std::size_t chain_idx, std::size_t step_idx)
      : std::runtime_error(what), chain(chain_idx), step(step_idx) {}
  std::size_t chain = 0;
  std::size_t step = 0;
};

// ---- mini-batch ----

struct Batch {
  std::vector<double> x;
  std::vector<double> y;
  std::size_t size() const { return x.size(); }
};

inline void check_batch(const Batch& b) {
  if (b.x.size() != b.y.size()) throw ConfigError("batch x/y size mismatch");
  if (b.x.empty()) throw ConfigError("empty batch");
}

// ---- method configurations ----

inline GaussianMixture1D default_is_proposal() {
  return GaussianMixture1D({0.5, 0.5}, {0.0, 0.0}, {0.2, 1.6});
}

inline GaussianMixture1D default_nce_noise() {
  return GaussianMixture1D({0.5, 0.5}, {0.0, 0.0}, {0.1, 0.8});
}

// Importance-sampled maximum likelihood.
struct MlisConfig {
  std::size_t m_samples = 1024;
  GaussianMixture1D proposal = default_is_proposal();
};

// Importance-sampled KL divergence against a smoothed target.
struct KldisConfig {
  std::size_t m_samples = 1024;
  GaussianMixture1D proposal = default_is_proposal();
  double sigma_t = 0.025;
  // Raw density-ratio weights by default; when set, weights are normalized to
  // sum to one per example (needed for the vanishing-sigma_t limit and for
  // exact insensitivity to constant energy offsets).
  bool self_normalize = false;
};

// Maximum likelihood with short Langevin chains providing the negative phase.
struct MlMcmcConfig {
  std::size_t m_samples = 1024;
  std::size_t steps = 1;
  double alpha = 0.05;
};

// Noise-contrastive estimation (ranking form).
struct NceConfig {
  std::size_t m_samples = 1024;
  GaussianMixture1D noise = default_nce_noise();
};

// Score matching on the clean data.
struct SmConfig {};

// Denoising score matching.
struct DsmConfig {
  std::size_t m_samples = 1024;
  double sigma = 0.2;
};

// NCE with an additionally perturbed positive: the data point in the first
// lane is shifted by a zero-centered draw whose component widths are the
// noise widths scaled by sqrt(beta).
struct NcePlusConfig {
  std::size_t m_samples = 1024;
  GaussianMixture1D noise = default_nce_noise();
  double beta = 0.025;
  // Test hook: keep the first lane at the data point without consuming any
  // RNG words, making the loss bitwise-identical to plain NCE on the same
  // stream.
  bool skip_perturbation = false;
};

using MethodConfig =
    std::variant<MlisConfig, KldisConfig, MlMcmcConfig, NceConfig, SmConfig, DsmConfig,
                 NcePlusConfig>;

inline std::string method_name(const MethodConfig& cfg) {
  return std::visit(
      [](const auto& c) -> std::string {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, MlisConfig>) return "ml-is";
        if constexpr (std::is_same_v<T, KldisConfig>) return "kld-is";
        if constexpr (std::is_same_v<T, MlMcmcConfig>) return "ml-mcmc";
        if constexpr (std::is_same_v<T, NceConfig>) return "nce";
        if constexpr (std::is_same_v<T, SmConfig>) return "sm";
        if constexpr (std::is_same_v<T, DsmConfig>) return "dsm";
        if constexpr (std::is_same_v<T, NcePlusConfig>) return "nce+";
      },
      cfg);
}

inline void validate(const MethodConfig& cfg) {
  std::visit(
      [](const auto& c) {
        using T = std::decay_t<decltype(c)>;
        if constexpr (!std::is_same_v<T, SmConfig>) {
          if (c.m_samples == 0) throw ConfigError("sample count must be positive");
        }
        if constexpr (std::is_same_v<T, KldisConfig>) {
          if (!(c.sigma_t > 0.0) || !std::isfinite(c.sigma_t))
            throw ConfigError("smoothing width sigma_t must be positive and finite");
        }
        if constexpr (std::is_same_v<T, MlMcmcConfig>) {
          if (c.steps == 0) throw ConfigError("chain length must be positive");
          if (!(c.alpha > 0.0) || !std::isfinite(c.alpha))
            throw ConfigError("step size alpha must be positive and finite");
        }
        if constexpr (std::is_same_v<T, DsmConfig>) {
          if (!(c.sigma > 0.0) || !std::isfinite(c.sigma))
            throw ConfigError("corruption width sigma must be positive and finite");
        }
        if constexpr (std::is_same_v<T, NcePlusConfig>) {
          if (!(c.beta > 0.0) || !std::isfinite(c.beta))
            throw ConfigError(
                "beta must be positive and finite; use method nce for the beta -> 0 limit");
        }
      },
      cfg);
}

// ---- energy recorders ----
//
// Anything that can record x-features and row-wise energies onto a Tape.
// Loss builders call record_x_features exactly once per example, in batch
// order, before recording that example's energy rows; recorders may rely on
// that to track the current example.
template <class R>
concept EnergyRecorder = requires(const R& r, Tape& t, NodeId node, double x) {
  { r.record_x_features(t, x) } -> std::convertible_to<NodeId>;
  { r.record_energy_rows(t, node, node) } -> std::convertible_to<NodeId>;
};

// ---- sample draws (RNG stream layout is part of the contract) ----

// n*m values, example-major: sample (i, j) recenters the proposal on y_i.
inline std::vector<double> draw_proposal_samples(const Batch& b,
                                                 const GaussianMixture1D& proposal,
                                                 std::size_t m, Rng& rng) {
  check_batch(b);
  if (m == 0) throw ConfigError("sample count must be positive");
  std::vector<double> s(b.size() * m);
  std::size_t k = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < m; ++j) s[k++] = proposal.sample(rng, b.y[i]);
  return s;
}

// n*(m+1) values, example-major; lane 0 of each row is the data point itself
// (no RNG words consumed for it), lanes 1..m are noise draws centered on y_i.
inline std::vector<double> draw_nce_rows(const Batch& b, const NceConfig& cfg, Rng& rng) {
  check_batch(b);
  std::vector<double> rows(b.size() * (cfg.m_samples + 1));
  std::size_t k = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    rows[k++] = b.y[i];
    for (std::size_t j = 0; j < cfg.m_samples; ++j) rows[k++] = cfg.noise.sample(rng, b.y[i]);
  }
  return rows;
}

// The zero-centered perturbation mixture: same component weights as the
// noise, zero means, widths scaled by sqrt(beta).
inline GaussianMixture1D perturbation_mixture(const NcePlusConfig& cfg) {
  const auto& noise = cfg.noise;
  std::vector<double> w(noise.weights().begin(), noise.weights().end());
  std::vector<double> mu(noise.components(), 0.0);
  std::vector<double> sd(noise.components());
  const double root = std::sqrt(cfg.beta);
  for (std::size_t k = 0; k < sd.size(); ++k) sd[k] = root * noise.stds()[k];
  return GaussianMixture1D(std::move(w), std::move(mu), std::move(sd));
}

// Like draw_nce_rows, but lane 0 is y_i plus one perturbation draw (taken
// before that example's noise draws).
inline std::vector<double> draw_nce_plus_rows(const Batch& b, const NcePlusConfig& cfg,
                                              Rng& rng) {
  check_batch(b);
  const GaussianMixture1D perturb = perturbation_mixture(cfg);
  std::vector<double> rows(b.size() * (cfg.m_samples + 1));
  std::size_t k = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (cfg.skip_perturbation)
      rows[k++] = b.y[i];
    else
      rows[k++] = b.y[i] + perturb.sample(rng, 0.0);
    for (std::size_t j = 0; j < cfg.m_samples; ++j) rows[k++] = cfg.noise.sample(rng, b.y[i]);
  }
  return rows;
}

// n*m corrupted targets, example-major: y_i + sigma * standard normal.
inline std::vector<double> draw_dsm_samples(const Batch& b, const DsmConfig& cfg, Rng& rng) {
  check_batch(b);
  std::vector<double> s(b.size() * cfg.m_samples);
  std::size_t k = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = 0; j < cfg.m_samples; ++j)
      s[k++] = b.y[i] + cfg.sigma * rng.normal();
  return s;
}

// ---- Langevin sampling ----

// One chain driven by a scalar drift d(y) = df/dy. Update:
//   y <- y + (alpha^2 / 2) * d(y) + alpha * eps,   eps ~ N(0, 1).
// When `visited` is given, every post-update position is appended.
template <class DriftFn>
  requires std::is_invocable_r_v<double, DriftFn&, double>
inline double langevin_chain(DriftFn&& drift, double y0, std::size_t steps, double alpha,
                             Rng& rng, std::vector<double>* visited = nullptr) {
  const double half_aa = 0.5 * alpha * alpha;
  double y = y0;
  if (visited) {
    visited->clear();
    visited->reserve(steps);
  }
  for (std::size_t l = 0; l < steps; ++l) {
    y = y + half_aa * drift(y) + alpha * rng.normal();
    if (!std::isfinite(y))
      throw ChainError("langevin chain 0 diverged at step " + std::to_string(l), 0, l);
    if (visited) visited->push_back(y);
  }
  return y;
}

inline double langevin_chain(const EbmModel& model, double x, double y0, std::size_t steps,
                             double alpha, Rng& rng, std::vector<double>* visited = nullptr) {
  const auto xfeat = model.x_features(x);
  Workspace ws;
  auto drift = [&](double y) {
    return model.forward_dual_with_features(xfeat, Dual{y, 1.0}, ws).d1;
  };
  return langevin_chain(drift, y0, steps, alpha, rng, visited);
}

// m chains per example, all started at that example's y_i, advanced in
// lockstep. `drift(i, ys, d1, count)` must fill d1[0..count) with df/dy for
// example i's lanes. Noise is pre-drawn in chain-major order: chain c uses
// eps[c * steps + l] at step l, so the result matches running the chains one
// at a time on the same stream. Returns the n*m final states, example-major.
template <class DriftRows>
  requires std::invocable<DriftRows&, std::size_t, const double*, double*, std::size_t>
inline std::vector<double> run_langevin_chains(DriftRows&& drift, const Batch& b, std::size_t m,
                                               std::size_t steps, double alpha, Rng& rng) {
  check_batch(b);
  if (m == 0 || steps == 0) throw ConfigError("chain count and length must be positive");
  const std::size_t n = b.size();
  std::vector<double> eps(n * m * steps);
  rng.normal_fill(eps);
  std::vector<double> ys(n * m);
  for (std::size_t i = 0; i < n; ++i)
    std::fill(ys.begin() + static_cast<std::ptrdiff_t>(i * m),
              ys.begin() + static_cast<std::ptrdiff_t>((i + 1) * m), b.y[i]);
  std::vector<double> d1(n * m);
  const double half_aa = 0.5 * alpha * alpha;
  for (std::size_t l = 0; l < steps; ++l) {
    for (std::size_t i = 0; i < n; ++i) drift(i, ys.data() + i * m, d1.data() + i * m, m);
    for (std::size_t c = 0; c < n * m; ++c) {
      ys[c] = ys[c] + half_aa * d1[c] + alpha * eps[c * steps + l];
      if (!std::isfinite(ys[c]))
        throw ChainError("langevin chain " + std::to_string(c) + " diverged at step " +
                             std::to_string(l),
                         c, l);
    }
  }
  return ys;
}

// Chains driven by the model's own energy derivative (two-plane forward).
// Chain states are treated as constants downstream: no gradient flows back
// through the sampling procedure.
inline std::vector<double> run_model_chains(const EbmModel& model, const Batch& b,
                                            const MlMcmcConfig& cfg, Rng& rng) {
  check_batch(b);
  const std::size_t m = cfg.m_samples;
  std::vector<std::vector<double>> xfeats(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) xfeats[i] = model.x_features(b.x[i]);
  Workspace ws;
  std::vector<double> in(2 * m), out(2 * m);
  std::fill(in.begin() + static_cast<std::ptrdiff_t>(m), in.end(), 1.0);  // d/dy seed
  auto drift = [&](std::size_t i, const double* ys, double* d1, std::size_t count) {
    std::copy(ys, ys + count, in.begin());
    model.energy_rows<2>(xfeats[i], in.data(), out.data(), static_cast<std::uint32_t>(count),
                         ws);
    std::copy(out.begin() + static_cast<std::ptrdiff_t>(count),
              out.begin() + static_cast<std::ptrdiff_t>(2 * count), d1);
  };
  return run_langevin_chains(drift, b, m, cfg.steps, cfg.alpha, rng);
}

// ---- recorded loss graphs ----

struct LossGraph {
  std::vector<NodeId> per_example;
  NodeId total = 0;
};

namespace detail {

inline NodeId mean_of(Tape& t, std::span<const NodeId> per_example) {
  const std::vector<double> w(per_example.size(),
                              1.0 / static_cast<double>(per_example.size()));
  return t.lincomb(per_example, w, 0.0);
}

inline void check_count(std::size_t got, std::size_t want, const char* what) {
  if (got != want)
    throw ConfigError(std::string(what) + ": expected " + std::to_string(want) +
                      " values, got " + std::to_string(got));
}

}  // namespace detail

// Importance-sampled maximum likelihood:
//   J_i = logsumexp_j [ f(x_i, s_ij) - log q(s_ij | y_i) ] - log M - f(x_i, y_i).
template <EnergyRecorder R>
LossGraph record_loss_ml_is(Tape& t, const R& rec, const Batch& b, const MlisConfig& cfg,
                            std::span<const double> samples) {
  check_batch(b);
  const std::size_t m = cfg.m_samples;
  detail::check_count(samples.size(), b.size() * m, "proposal samples");
  LossGraph g;
  g.per_example.reserve(b.size());
  // One energy row per example covers the data point (lane 0) and the M
  // samples; a -inf offset knocks lane 0 out of the logsumexp (its exp term
  // is an exact +0), so f(x_i, y_i) shares the row instead of needing a
  // second network pass.
  std::vector<double> off(m + 1), cand(m + 1);
  const double log_m = std::log(static_cast<double>(m));
  for (std::size_t i = 0; i < b.size(); ++i) {
    const NodeId xf = rec.record_x_features(t, b.x[i]);
    const std::span<const double> row = samples.subspan(i * m, m);
    cand[0] = b.y[i];
    std::copy(row.begin(), row.end(), cand.begin() + 1);
    const NodeId es = rec.record_energy_rows(t, xf, t.constant_row(cand));
    off[0] = -std::numeric_limits<double>::infinity();
    cfg.proposal.logpdf_rows(row, b.y[i], std::span<double>(off).subspan(1));
    for (std::size_t j = 1; j <= m; ++j) off[j] = -off[j];
    const NodeId lse_parents[] = {es};
    const NodeId lse = t.logsumexp(lse_parents, off);
    const NodeId parents[] = {lse, t.index(es, 0)};
    const double weights[] = {1.0, -1.0};
    g.per_example.push_back(t.lincomb(parents, weights, -log_m));
  }
  g.total = detail::mean_of(t, g.per_example);
  return g;
}

// Importance-sampled KL divergence against the sigma_t-smoothed target:
//   J_i = logsumexp_j [ f - log q ] - log M - sum_j w_ij f(x_i, s_ij),
// with w_ij = N(s_ij; y_i, sigma_t^2) / (M q(s_ij | y_i)), optionally
// normalized to sum to one per example.
template <EnergyRecorder R>
LossGraph record_loss_kld_is(Tape& t, const R& rec, const Batch& b, const KldisConfig& cfg,
                             std::span<const double> samples) {
  check_batch(b);
  const std::size_t m = cfg.m_samples;
  detail::check_count(samples.size(), b.size() * m, "proposal samples");
  LossGraph g;
  g.per_example.reserve(b.size());
  std::vector<double> off(m), lw(m), w(m), logq(m);
  const double log_m = std::log(static_cast<double>(m));
  // hoisted constants of the smoothing gaussian's log density
  const double ls_t = std::log(cfg.sigma_t);
  const double half_l2p = 0.5 * kLogTwoPi;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const NodeId xf = rec.record_x_features(t, b.x[i]);
    const std::span<const double> row = samples.subspan(i * m, m);
    const NodeId es = rec.record_energy_rows(t, xf, t.constant_row(row));
    cfg.proposal.logpdf_rows(row, b.y[i], logq);
    for (std::size_t j = 0; j < m; ++j) {
      off[j] = -logq[j];
      const double z = (row[j] - b.y[i]) / cfg.sigma_t;
      lw[j] = -0.5 * z * z - ls_t - half_l2p - logq[j];
    }
    if (cfg.self_normalize) {
      const double mx = *std::max_element(lw.begin(), lw.end());
      double sum = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        w[j] = std::exp(lw[j] - mx);
        sum += w[j];
      }
      for (std::size_t j = 0; j < m; ++j) w[j] /= sum;
    } else {
      for (std::size_t j = 0; j < m; ++j) w[j] = std::exp(lw[j]) / static_cast<double>(m);
    }
    const NodeId lse_parents[] = {es};
    const NodeId lse = t.logsumexp(lse_parents, off);
    const NodeId weighted_parents[] = {es};
    const NodeId weighted = t.lincomb(weighted_parents, w, 0.0);
    const NodeId parents[] = {lse, weighted};
    const double weights[] = {1.0, -1.0};
    g.per_example.push_back(t.lincomb(parents, weights, -log_m));
  }
  g.total = detail::mean_of(t, g.per_example);
  return g;
}

// Contrastive maximum likelihood with sampled negatives:
//   J_i = (1/M) sum_j f(x_i, s_ij) - f(x_i, y_i).
template <EnergyRecorder R>
LossGraph record_loss_ml_mcmc(Tape& t, const R& rec, const Batch& b, const MlMcmcConfig& cfg,
                              std::span<const double> chains) {
  check_batch(b);
  const std::size_t m = cfg.m_samples;
  detail::check_count(chains.size(), b.size() * m, "chain states");
  LossGraph g;
  g.per_example.reserve(b.size());
  std::vector<double> weights(m + 1, 1.0 / static_cast<double>(m));
  weights[m] = -1.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const NodeId xf = rec.record_x_features(t, b.x[i]);
    const NodeId es = rec.record_energy_rows(t, xf, t.constant_row(chains.subspan(i * m, m)));
    const NodeId ed = rec.record_energy_rows(t, xf, t.constant(b.y[i]));
    const NodeId parents[] = {es, ed};
    g.per_example.push_back(t.lincomb(parents, weights, 0.0));
  }
  g.total = detail::mean_of(t, g.per_example);
  return g;
}

namespace detail {

// Shared ranking loss over rows of M+1 candidates whose first lane holds the
// positive:
//   J_i = logsumexp_j [ f(x_i, r_ij) - log p_N(r_ij | y_i) ]
//         - ( f(x_i, r_i0) - log p_N(r_i0 | y_i) ).
template <EnergyRecorder R>
LossGraph record_ranking_loss(Tape& t, const R& rec, const Batch& b,
                              const GaussianMixture1D& noise, std::size_t m,
                              std::span<const double> rows) {
  check_batch(b);
  check_count(rows.size(), b.size() * (m + 1), "candidate rows");
  LossGraph g;
  g.per_example.reserve(b.size());
  std::vector<double> off(m + 1);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const NodeId xf = rec.record_x_features(t, b.x[i]);
    const std::span<const double> row = rows.subspan(i * (m + 1), m + 1);
    const NodeId es = rec.record_energy_rows(t, xf, t.constant_row(row));
    noise.logpdf_rows(row, b.y[i], off);
    for (std::size_t j = 0; j <= m; ++j) off[j] = -off[j];
    const NodeId lse_parents[] = {es};
    const NodeId lse = t.logsumexp(lse_parents, off);
    const NodeId f0 = t.index(es, 0);
    const NodeId parents[] = {lse, f0};
    const double weights[] = {1.0, -1.0};
    g.per_example.push_back(t.lincomb(parents, weights, -off[0]));
  }
  g.total = mean_of(t, g.per_example);
  return g;
}

}  // namespace detail

template <EnergyRecorder R>
LossGraph record_loss_nce(Tape& t, const R& rec, const Batch& b, const NceConfig& cfg,
                          std::span<const double> rows) {
  return detail::record_ranking_loss(t, rec, b, cfg.noise, cfg.m_samples, rows);
}

template <EnergyRecorder R>
LossGraph record_loss_nce_plus(Tape& t, const R& rec, const Batch& b, const NcePlusConfig& cfg,
                               std::span<const double> rows) {
  return detail::record_ranking_loss(t, rec, b, cfg.noise, cfg.m_samples, rows);
}

// Score matching on clean data:
//   J_i = d2f/dy2 (x_i, y_i) + (1/2) (df/dy (x_i, y_i))^2.
template <EnergyRecorder R>
LossGraph record_loss_sm(Tape& t, const R& rec, const Batch& b) {
  check_batch(b);
  LossGraph g;
  g.per_example.reserve(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const NodeId xf = rec.record_x_features(t, b.x[i]);
    const NodeId yj = t.constant_jet_row(std::span<const double>(&b.y[i], 1), 1.0, 0.0);
    const NodeId e = rec.record_energy_rows(t, xf, yj);
    const NodeId d1 = t.jet_d1(e);
    const NodeId d2 = t.jet_d2(e);
    const NodeId parents[] = {d2, t.mul(d1, d1)};
    const double weights[] = {1.0, 0.5};
    g.per_example.push_back(t.lincomb(parents, weights, 0.0));
  }
  g.total = detail::mean_of(t, g.per_example);
  return g;
}

// Denoising score matching on corrupted targets:
//   J_i = (1/M) sum_j ( df/dy (x_i, s_ij) + (s_ij - y_i) / sigma^2 )^2.
template <EnergyRecorder R>
LossGraph record_loss_dsm(Tape& t, const R& rec, const Batch& b, const DsmConfig& cfg,
                          std::span<const double> samples) {
  check_batch(b);
  const std::size_t m = cfg.m_samples;
  detail::check_count(samples.size(), b.size() * m, "corrupted targets");
  LossGraph g;
  g.per_example.reserve(b.size());
  const double sigma2 = cfg.sigma * cfg.sigma;
  std::vector<double> resid(m);
  const std::vector<double> weights(m, 1.0 / static_cast<double>(m));
  for (std::size_t i = 0; i < b.size(); ++i) {
    const NodeId xf = rec.record_x_features(t, b.x[i]);
    const std::span<const double> row = samples.subspan(i * m, m);
    const NodeId yj = t.constant_jet_row(row, 1.0, 0.0);
    const NodeId e = rec.record_energy_rows(t, xf, yj);
    const NodeId d1 = t.jet_d1(e);
    for (std::size_t j = 0; j < m; ++j) resid[j] = (row[j] - b.y[i]) / sigma2;
    const NodeId shifted = t.add_row(d1, resid);
    const NodeId sq_parents[] = {t.mul(shifted, shifted)};
    g.per_example.push_back(t.lincomb(sq_parents, weights, 0.0));
  }
  g.total = detail::mean_of(t, g.per_example);
  return g;
}

// ---- one-call driver ----

struct LossBreakdown {
  double total = 0.0;
  std::vector<double> per_example;
};

// When given, receives a copy of the raw draws the loss consumed (samples,
// candidate rows, or chain states; empty for score matching).
struct SampleLog {
  std::vector<double> values;
};

// Draws this step's samples from `rng`, records the loss graph against the
// model's parameters, and (optionally) runs backward. A non-finite loss still
// returns a breakdown, but a requested gradient is NaN-filled; chain
// divergence propagates as ChainError.
//
// This overload records onto a caller-owned scratch tape (reset on entry).
// Reusing one tape across batches keeps its buffers warm, which is the
// difference between allocator churn and arithmetic dominating a training
// step. The tape must be bound to this model's parameter storage.
inline LossBreakdown loss_and_grad(Tape& t, const EbmModel& model, const Batch& b,
                                   const MethodConfig& cfg, Rng& rng,
                                   std::vector<double>* grad_out = nullptr,
                                   SampleLog* slog = nullptr) {
  validate(cfg);
  check_batch(b);
  if (t.theta().data() != model.theta().data() || t.theta().size() != model.theta().size())
    throw ConfigError("scratch tape is bound to different parameter storage");
  t.reset();
  if (slog) slog->values.clear();
  auto log_draws = [&](const std::vector<double>& v) {
    if (slog) slog->values = v;
  };
  const LossGraph g = std::visit(
      [&](const auto& c) -> LossGraph {
        using T = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<T, MlisConfig>) {
          const auto s = draw_proposal_samples(b, c.proposal, c.m_samples, rng);
          log_draws(s);
          return record_loss_ml_is(t, model, b, c, s);
        } else if constexpr (std::is_same_v<T, KldisConfig>) {
          const auto s = draw_proposal_samples(b, c.proposal, c.m_samples, rng);
          log_draws(s);
          return record_loss_kld_is(t, model, b, c, s);
        } else if constexpr (std::is_same_v<T, MlMcmcConfig>) {
          const auto s = run_model_chains(model, b, c, rng);
          log_draws(s);
          return record_loss_ml_mcmc(t, model, b, c, s);
        } else if constexpr (std::is_same_v<T, NceConfig>) {
          const auto s = draw_nce_rows(b, c, rng);
          log_draws(s);
          return record_loss_nce(t, model, b, c, s);
        } else if constexpr (std::is_same_v<T, SmConfig>) {
          return record_loss_sm(t, model, b);
        } else if constexpr (std::is_same_v<T, DsmConfig>) {
          const auto s = draw_dsm_samples(b, c, rng);
          log_draws(s);
          return record_loss_dsm(t, model, b, c, s);
        } else {
          const auto s = draw_nce_plus_rows(b, c, rng);
          log_draws(s);
          return record_loss_nce_plus(t, model, b, c, s);
        }
      },
      cfg);
  LossBreakdown bk;
  bk.per_example.resize(g.per_example.size());
  for (std::size_t i = 0; i < g.per_example.size(); ++i)
    bk.per_example[i] = t.value(g.per_example[i]);
  bk.total = t.value(g.total);
  if (grad_out) {
    if (std::isfinite(bk.total)) {
      *grad_out = t.backward(g.total);
    } else {
      grad_out->assign(t.param_count(), std::numeric_limits<double>::quiet_NaN());
    }
  }
  return bk;
}

inline LossBreakdown loss_and_grad(const EbmModel& model, const Batch& b,
                                   const MethodConfig& cfg, Rng& rng,
                                   std::vector<double>* grad_out = nullptr,
                                   SampleLog* slog = nullptr) {
  Tape t(model.theta());
  return loss_and_grad(t, model, b, cfg, rng, grad_out, slog);
}

}  // namespace ebmreg
