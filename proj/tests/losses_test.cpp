// Frozen oracles for the seven training losses and the Langevin sampler.
// Closed forms are computed by hand (or replicated with independent
// arithmetic) before comparing against the builders.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ebmreg/gradcheck.hpp"
#include "ebmreg/losses.hpp"
#include "ebmreg/mixture.hpp"
#include "ebmreg/model.hpp"
#include "ebmreg/rng.hpp"
#include "ebmreg/tape.hpp"

namespace {

using ebmreg::Batch;
using ebmreg::ChainError;
using ebmreg::ConfigError;
using ebmreg::EbmModel;
using ebmreg::GaussianMixture1D;
using ebmreg::NodeId;
using ebmreg::Rng;
using ebmreg::Tape;

Batch small_batch() {
  Batch b;
  b.x = {-1.2, 0.4, 2.1};
  b.y = {0.7, -0.3, 1.1};
  return b;
}

double log_sum_exp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double t : v) mx = std::max(mx, t);
  double acc = 0.0;
  for (double t : v) acc += std::exp(t - mx);
  return mx + std::log(acc);
}

double max_abs(std::span<const double> v) {
  double mx = 0.0;
  for (double t : v) mx = std::max(mx, std::abs(t));
  return mx;
}

// ---- analytic stub recorders ----
//
// Loss builders call record_x_features exactly once per example, in batch
// order, before recording that example's energy rows; stubs count those calls
// to know which target y_i the incoming rows belong to. Energies are recorded
// as tape programs over the incoming y row so jet rows carry the right
// derivatives automatically.

// f(x, y) = level
struct ConstantEnergy {
  double level = 0.0;
  NodeId record_x_features(Tape& t, double x) const { return t.constant(x); }
  NodeId record_energy_rows(Tape& t, NodeId, NodeId y) const {
    return t.add_imm(t.mul_imm(y, 0.0), level);
  }
};

// f(x, y) = -y^2 / 2
struct NegHalfSquare {
  NodeId record_x_features(Tape& t, double x) const { return t.constant(x); }
  NodeId record_energy_rows(Tape& t, NodeId, NodeId y) const {
    return t.mul_imm(t.mul(y, y), -0.5);
  }
};

// f(x, y) = log p(y | y_i): the recentered mixture's own log-density, which
// makes every ranking logit exactly zero when p is the noise distribution.
struct MatchedMixtureLogDensity {
  const GaussianMixture1D* dist;
  const Batch* batch;
  mutable std::size_t calls = 0;
  mutable std::size_t cur = 0;
  NodeId record_x_features(Tape& t, double x) const {
    cur = calls++;
    return t.constant(x);
  }
  NodeId record_energy_rows(Tape& t, NodeId, NodeId y) const {
    const auto ys = t.values(y);
    std::vector<double> v(ys.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = dist->logpdf(ys[i], batch->y[cur]);
    return t.constant_row(v);
  }
};

// f(x, y) = -(y - y_i)^2 / (2 sigma^2): its score cancels the corruption
// residual exactly, and its curvature is the constant -1/sigma^2.
struct MatchedScoreQuadratic {
  const Batch* batch;
  double sigma = 1.0;
  mutable std::size_t calls = 0;
  mutable std::size_t cur = 0;
  NodeId record_x_features(Tape& t, double x) const {
    cur = calls++;
    return t.constant(x);
  }
  NodeId record_energy_rows(Tape& t, NodeId, NodeId y) const {
    NodeId d = t.add_imm(y, -batch->y[cur]);
    return t.mul_imm(t.mul(d, d), -0.5 / (sigma * sigma));
  }
};

// f(x, y) = base(x, y) + shift
template <class R>
struct OffsetEnergy {
  const R* base;
  double shift = 0.0;
  NodeId record_x_features(Tape& t, double x) const { return base->record_x_features(t, x); }
  NodeId record_energy_rows(Tape& t, NodeId xf, NodeId y) const {
    return t.add_imm(base->record_energy_rows(t, xf, y), shift);
  }
};

// ---- configuration ----

TEST(MethodConfigTest, DefaultsMatchContract) {
  ebmreg::MlisConfig mlis;
  EXPECT_EQ(mlis.m_samples, 1024u);
  ASSERT_EQ(mlis.proposal.components(), 2u);
  EXPECT_DOUBLE_EQ(mlis.proposal.stds()[0], 0.2);
  EXPECT_DOUBLE_EQ(mlis.proposal.stds()[1], 1.6);
  EXPECT_DOUBLE_EQ(mlis.proposal.weights()[0], 0.5);
  EXPECT_DOUBLE_EQ(mlis.proposal.means()[0], 0.0);

  ebmreg::KldisConfig kldis;
  EXPECT_EQ(kldis.m_samples, 1024u);
  EXPECT_DOUBLE_EQ(kldis.sigma_t, 0.025);
  EXPECT_FALSE(kldis.self_normalize);
  EXPECT_DOUBLE_EQ(kldis.proposal.stds()[1], 1.6);

  ebmreg::MlMcmcConfig mcmc;
  EXPECT_EQ(mcmc.m_samples, 1024u);
  EXPECT_EQ(mcmc.steps, 1u);
  EXPECT_DOUBLE_EQ(mcmc.alpha, 0.05);

  ebmreg::NceConfig nce;
  EXPECT_EQ(nce.m_samples, 1024u);
  EXPECT_DOUBLE_EQ(nce.noise.stds()[0], 0.1);
  EXPECT_DOUBLE_EQ(nce.noise.stds()[1], 0.8);

  ebmreg::DsmConfig dsm;
  EXPECT_EQ(dsm.m_samples, 1024u);
  EXPECT_DOUBLE_EQ(dsm.sigma, 0.2);

  ebmreg::NcePlusConfig ncep;
  EXPECT_EQ(ncep.m_samples, 1024u);
  EXPECT_DOUBLE_EQ(ncep.beta, 0.025);
  EXPECT_FALSE(ncep.skip_perturbation);

  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{mlis}), "ml-is");
  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{kldis}), "kld-is");
  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{mcmc}), "ml-mcmc");
  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{nce}), "nce");
  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{ebmreg::SmConfig{}}), "sm");
  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{dsm}), "dsm");
  EXPECT_EQ(ebmreg::method_name(ebmreg::MethodConfig{ncep}), "nce+");
}

TEST(MethodConfigTest, ValidationRejectsBadConfigs) {
  using ebmreg::validate;
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::MlisConfig{0}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::KldisConfig{0}}), ConfigError);
  EXPECT_THROW(
      validate(ebmreg::MethodConfig{ebmreg::KldisConfig{8, ebmreg::default_is_proposal(), 0.0}}),
      ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::MlMcmcConfig{0, 1, 0.05}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::MlMcmcConfig{8, 0, 0.05}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::MlMcmcConfig{8, 1, 0.0}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::NceConfig{0}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::DsmConfig{0}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::DsmConfig{8, 0.0}}), ConfigError);
  EXPECT_THROW(validate(ebmreg::MethodConfig{ebmreg::NcePlusConfig{0}}), ConfigError);
  EXPECT_THROW(
      validate(ebmreg::MethodConfig{ebmreg::NcePlusConfig{8, ebmreg::default_nce_noise(), 0.0}}),
      ConfigError);
  EXPECT_NO_THROW(validate(ebmreg::MethodConfig{ebmreg::SmConfig{}}));
}

// ---- closed-form loss identities ----

TEST(NceLossTest, UniformLogitsGiveLogMPlusOne) {
  // A model that reproduces the noise log-density makes all M+1 logits equal,
  // so the ranking loss is exactly the log of the class count.
  Batch b = small_batch();
  ebmreg::NceConfig cfg{1024};
  Rng rng(2024);
  const auto rows = ebmreg::draw_nce_rows(b, cfg, rng);
  MatchedMixtureLogDensity stub{&cfg.noise, &b};
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_nce(t, stub, b, cfg, rows);
  EXPECT_NEAR(std::log(1025.0), 6.932448, 1e-6);
  for (NodeId id : g.per_example) EXPECT_NEAR(t.value(id), std::log(1025.0), 1e-10);
  EXPECT_NEAR(t.value(g.total), std::log(1025.0), 1e-10);
}

TEST(NcePlusLossTest, UniformLogitsGiveLogMPlusOne) {
  // Same identity with the perturbed first lane: the stub scores that lane
  // with the same recentered density the builder uses for its offset.
  Batch b = small_batch();
  ebmreg::NcePlusConfig cfg{1024};
  Rng rng(77);
  const auto rows = ebmreg::draw_nce_plus_rows(b, cfg, rng);
  for (std::size_t i = 0; i < b.size(); ++i)
    EXPECT_NE(rows[i * (cfg.m_samples + 1)], b.y[i]);  // lane 0 actually perturbed
  MatchedMixtureLogDensity stub{&cfg.noise, &b};
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_nce_plus(t, stub, b, cfg, rows);
  for (NodeId id : g.per_example) EXPECT_NEAR(t.value(id), std::log(1025.0), 1e-10);
  EXPECT_NEAR(t.value(g.total), std::log(1025.0), 1e-10);
}

TEST(DsmLossTest, MatchedScoreStubHasZeroLoss) {
  // When the model score equals the negated corruption residual the squared
  // objective vanishes.
  Batch b = small_batch();
  ebmreg::DsmConfig cfg{256, 0.5};
  Rng rng(5);
  const auto samples = ebmreg::draw_dsm_samples(b, cfg, rng);
  MatchedScoreQuadratic stub{&b, cfg.sigma};
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_dsm(t, stub, b, cfg, samples);
  for (NodeId id : g.per_example) EXPECT_NEAR(t.value(id), 0.0, 1e-12);
  EXPECT_NEAR(t.value(g.total), 0.0, 1e-12);
}

TEST(MlMcmcLossTest, ConstantEnergyHasZeroLoss) {
  Batch b = small_batch();
  ebmreg::MlMcmcConfig cfg{64, 3, 0.05};

  // Stub with a nonzero constant level and a flat drift.
  Rng rng(9);
  auto flat_drift = [](std::size_t, const double*, double* d1, std::size_t count) {
    std::fill(d1, d1 + count, 0.0);
  };
  const auto chains = ebmreg::run_langevin_chains(flat_drift, b, cfg.m_samples, cfg.steps,
                                                  cfg.alpha, rng);
  ConstantEnergy stub{2.5};
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_ml_mcmc(t, stub, b, cfg, chains);
  for (NodeId id : g.per_example) EXPECT_NEAR(t.value(id), 0.0, 1e-12);
  EXPECT_NEAR(t.value(g.total), 0.0, 1e-12);

  // Production path: an all-zero parameter vector is a constant (zero) model.
  EbmModel model;
  Rng rng2(10);
  const auto bk = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{cfg}, rng2, nullptr);
  EXPECT_NEAR(bk.total, 0.0, 1e-12);
}

TEST(SmLossTest, QuadraticStubClosedForm) {
  Batch b = small_batch();
  b.y[1] = 0.0;  // include the centered case, whose loss is exactly -1
  NegHalfSquare stub;
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_sm(t, stub, b);
  ASSERT_EQ(g.per_example.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double expected = -1.0 + 0.5 * b.y[i] * b.y[i];
    EXPECT_NEAR(t.value(g.per_example[i]), expected, 1e-12);
  }
  EXPECT_NEAR(t.value(g.per_example[1]), -1.0, 1e-12);
}

TEST(SmLossTest, MatchedGaussianScoreStub) {
  // At the centering point the score is zero and the curvature term remains.
  Batch b = small_batch();
  const double sigma = 0.4;
  MatchedScoreQuadratic stub{&b, sigma};
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_sm(t, stub, b);
  for (NodeId id : g.per_example)
    EXPECT_NEAR(t.value(id), -1.0 / (sigma * sigma), 1e-12);
}

TEST(MlisLossTest, ZeroModelSingleSampleClosedForm) {
  // f == 0 and M = 1 collapse the estimator to the negative proposal
  // log-density at the single drawn sample.
  Batch b = small_batch();
  ebmreg::MlisConfig cfg{1};
  EbmModel model;  // zero parameters -> zero energy
  Rng rng(31);
  ebmreg::SampleLog slog;
  const auto bk = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{cfg}, rng, nullptr, &slog);
  ASSERT_EQ(slog.values.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double expected = -cfg.proposal.logpdf(slog.values[i], b.y[i]);
    EXPECT_NEAR(bk.per_example[i], expected, 1e-12);
  }

  // The sample stream is example-major: replay it with a same-keyed engine.
  Rng replay(31);
  for (std::size_t i = 0; i < b.size(); ++i)
    EXPECT_EQ(slog.values[i], cfg.proposal.sample(replay, b.y[i]));
}

TEST(MlisLossTest, MatchedStubRecoversNegLogDensity) {
  // With f = log q(y|y_i) every importance weight is one, so the partition
  // estimate is exact and only -f(x_i, y_i) survives.
  Batch b = small_batch();
  ebmreg::MlisConfig cfg{1024};
  Rng rng(12);
  const auto samples = ebmreg::draw_proposal_samples(b, cfg.proposal, cfg.m_samples, rng);
  MatchedMixtureLogDensity stub{&cfg.proposal, &b};
  Tape t(std::span<const double>{});
  const auto g = ebmreg::record_loss_ml_is(t, stub, b, cfg, samples);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double expected = -cfg.proposal.logpdf(b.y[i], b.y[i]);
    EXPECT_NEAR(t.value(g.per_example[i]), expected, 1e-9);
  }
}

TEST(KldisLossTest, ZeroModelKeepsOnlyFirstTerm) {
  // f == 0 annihilates the importance-weighted second term.
  Batch b = small_batch();
  ebmreg::KldisConfig cfg{64};
  EbmModel model;
  Rng rng(41);
  ebmreg::SampleLog slog;
  const auto bk = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{cfg}, rng, nullptr, &slog);
  const std::size_t m = cfg.m_samples;
  for (std::size_t i = 0; i < b.size(); ++i) {
    std::vector<double> logits(m);
    for (std::size_t k = 0; k < m; ++k)
      logits[k] = -cfg.proposal.logpdf(slog.values[i * m + k], b.y[i]);
    const double expected = log_sum_exp(logits) - std::log(static_cast<double>(m));
    EXPECT_NEAR(bk.per_example[i], expected, 1e-10);
  }
}

TEST(KldisLossTest, TinySmoothingApproachesMlisOnSmoothStub) {
  // As the smoothing width shrinks, the self-normalized weighted term
  // concentrates on the sample nearest the target, recovering the
  // maximum-likelihood objective on a smooth energy.
  Batch b = small_batch();
  ebmreg::MlisConfig mlis{1024};
  ebmreg::KldisConfig kldis{1024, ebmreg::default_is_proposal(), 1e-6, true};
  Rng rng(8);
  const auto samples = ebmreg::draw_proposal_samples(b, mlis.proposal, mlis.m_samples, rng);
  NegHalfSquare stub;
  Tape t1(std::span<const double>{});
  const auto g1 = ebmreg::record_loss_ml_is(t1, stub, b, mlis, samples);
  Tape t2(std::span<const double>{});
  const auto g2 = ebmreg::record_loss_kld_is(t2, stub, b, kldis, samples);
  EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), 1e-2);
}

TEST(NceLossTest, TwoClassClosedForm) {
  // M = 1 and f == 0: loss = log(1 + exp(a0 - a1)) with a_k the noise
  // log-densities at the data point and at the drawn sample.
  Batch b = small_batch();
  ebmreg::NceConfig cfg{1};
  EbmModel model;
  Rng rng(3);
  ebmreg::SampleLog slog;
  const auto bk = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{cfg}, rng, nullptr, &slog);
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double a0 = cfg.noise.logpdf(slog.values[i * 2], b.y[i]);
    const double a1 = cfg.noise.logpdf(slog.values[i * 2 + 1], b.y[i]);
    const double expected = a0 + std::log(std::exp(-a0) + std::exp(-a1));
    EXPECT_NEAR(bk.per_example[i], expected, 1e-12);
    EXPECT_EQ(slog.values[i * 2], b.y[i]);  // lane 0 is the data point
  }
}

TEST(NceLossTest, LossIsNonNegative) {
  Batch b = small_batch();
  ebmreg::NceConfig cfg{32};
  EbmModel model;
  model.init(17);
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(100 + seed);
    const auto bk = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{cfg}, rng, nullptr);
    for (double v : bk.per_example) EXPECT_GE(v, 0.0);
    EXPECT_GE(bk.total, 0.0);
  }
}

TEST(NceLossTest, PermutingNoiseSamplesIsInvariant) {
  Batch b = small_batch();
  ebmreg::NceConfig cfg{16};
  Rng rng(55);
  auto rows = ebmreg::draw_nce_rows(b, cfg, rng);
  EbmModel model;
  model.init(23);

  Tape t1(model.theta());
  const auto g1 = ebmreg::record_loss_nce(t1, model, b, cfg, rows);

  // Reverse the noise lanes of every example; lane 0 stays in place.
  const std::size_t stride = cfg.m_samples + 1;
  for (std::size_t i = 0; i < b.size(); ++i)
    std::reverse(rows.begin() + static_cast<std::ptrdiff_t>(i * stride + 1),
                 rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
  Tape t2(model.theta());
  const auto g2 = ebmreg::record_loss_nce(t2, model, b, cfg, rows);

  for (std::size_t i = 0; i < b.size(); ++i)
    EXPECT_NEAR(t1.value(g1.per_example[i]), t2.value(g2.per_example[i]), 1e-12);
  EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), 1e-12);
}

TEST(NcePlusLossTest, DisabledPerturbationRecoversNceBitwise) {
  Batch b = small_batch();
  EbmModel model;
  model.init(29);
  ebmreg::NcePlusConfig plus{16};
  plus.skip_perturbation = true;
  ebmreg::NceConfig plain{16};

  Rng r1(91);
  const auto a = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{plus}, r1, nullptr);
  Rng r2(91);
  const auto c = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{plain}, r2, nullptr);
  EXPECT_EQ(a.total, c.total);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(a.per_example[i], c.per_example[i]);
}

TEST(NcePlusLossTest, PerturbationStreamIsPinned) {
  // Per example: one zero-centered draw with sqrt(beta)-scaled widths for the
  // first lane, then the M noise samples recentered on the target.
  Batch b = small_batch();
  ebmreg::NcePlusConfig cfg{4, GaussianMixture1D({0.6, 0.4}, {0.3, -0.2}, {0.1, 0.8}), 0.09};
  Rng rng(333);
  const auto rows = ebmreg::draw_nce_plus_rows(b, cfg, rng);

  const double root = std::sqrt(cfg.beta);
  GaussianMixture1D perturb({0.6, 0.4}, {0.0, 0.0}, {root * 0.1, root * 0.8});
  Rng replay(333);
  std::size_t k = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(rows[k++], b.y[i] + perturb.sample(replay, 0.0));
    for (std::size_t m = 0; m < cfg.m_samples; ++m)
      EXPECT_EQ(rows[k++], cfg.noise.sample(replay, b.y[i]));
  }
}

TEST(DsmLossTest, SampleStreamIsPinned) {
  Batch b = small_batch();
  ebmreg::DsmConfig cfg{3, 0.2};
  Rng rng(21);
  const auto samples = ebmreg::draw_dsm_samples(b, cfg, rng);
  Rng replay(21);
  std::size_t k = 0;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t m = 0; m < cfg.m_samples; ++m)
      EXPECT_EQ(samples[k++], b.y[i] + cfg.sigma * replay.normal());
}

// ---- invariants ----

TEST(LossEquivarianceTest, ConstantEnergyOffsetLeavesLossesUnchanged) {
  Batch b = small_batch();
  EbmModel model;
  model.init(7);
  OffsetEnergy<EbmModel> shifted{&model, 3.7};
  constexpr double kTol = 1e-10;

  {
    ebmreg::MlisConfig cfg{32};
    Rng rng(1);
    const auto s = ebmreg::draw_proposal_samples(b, cfg.proposal, cfg.m_samples, rng);
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_ml_is(t1, model, b, cfg, s);
    const auto g2 = ebmreg::record_loss_ml_is(t2, shifted, b, cfg, s);
    EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), kTol);
  }
  {
    // Self-normalized weights sum to one, so the offset cancels between the
    // two terms.
    ebmreg::KldisConfig cfg{32, ebmreg::default_is_proposal(), 0.025, true};
    Rng rng(2);
    const auto s = ebmreg::draw_proposal_samples(b, cfg.proposal, cfg.m_samples, rng);
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_kld_is(t1, model, b, cfg, s);
    const auto g2 = ebmreg::record_loss_kld_is(t2, shifted, b, cfg, s);
    EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), kTol);

    // Raw density-ratio weights have a random sum S != 1, so the offset
    // shifts the loss by exactly c * (1 - mean_i S_i); pin that prediction.
    ebmreg::KldisConfig raw{32};
    Tape t3(model.theta()), t4(model.theta());
    const auto g3 = ebmreg::record_loss_kld_is(t3, model, b, raw, s);
    const auto g4 = ebmreg::record_loss_kld_is(t4, shifted, b, raw, s);
    double mean_weight_sum = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      double si = 0.0;
      for (std::size_t k = 0; k < raw.m_samples; ++k) {
        const double v = s[i * raw.m_samples + k];
        si += std::exp(ebmreg::gaussian_logpdf(v, b.y[i], raw.sigma_t) -
                       raw.proposal.logpdf(v, b.y[i])) /
              static_cast<double>(raw.m_samples);
      }
      mean_weight_sum += si / static_cast<double>(b.size());
    }
    const double predicted_shift = shifted.shift * (1.0 - mean_weight_sum);
    EXPECT_NEAR(t4.value(g4.total) - t3.value(g3.total), predicted_shift, 1e-9);
  }
  {
    ebmreg::MlMcmcConfig cfg{8, 4, 0.05};
    Rng rng(3);
    const auto chains = ebmreg::run_model_chains(model, b, cfg, rng);
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_ml_mcmc(t1, model, b, cfg, chains);
    const auto g2 = ebmreg::record_loss_ml_mcmc(t2, shifted, b, cfg, chains);
    EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), kTol);
  }
  {
    ebmreg::NceConfig cfg{32};
    Rng rng(4);
    const auto rows = ebmreg::draw_nce_rows(b, cfg, rng);
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_nce(t1, model, b, cfg, rows);
    const auto g2 = ebmreg::record_loss_nce(t2, shifted, b, cfg, rows);
    EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), kTol);
  }
  {
    ebmreg::NcePlusConfig cfg{32};
    Rng rng(5);
    const auto rows = ebmreg::draw_nce_plus_rows(b, cfg, rng);
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_nce_plus(t1, model, b, cfg, rows);
    const auto g2 = ebmreg::record_loss_nce_plus(t2, shifted, b, cfg, rows);
    EXPECT_NEAR(t1.value(g1.total), t2.value(g2.total), kTol);
  }
  {
    // Derivative-only objectives ignore the shift bitwise.
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_sm(t1, model, b);
    const auto g2 = ebmreg::record_loss_sm(t2, shifted, b);
    EXPECT_EQ(t1.value(g1.total), t2.value(g2.total));
  }
  {
    ebmreg::DsmConfig cfg{32};
    Rng rng(6);
    const auto s = ebmreg::draw_dsm_samples(b, cfg, rng);
    Tape t1(model.theta()), t2(model.theta());
    const auto g1 = ebmreg::record_loss_dsm(t1, model, b, cfg, s);
    const auto g2 = ebmreg::record_loss_dsm(t2, shifted, b, cfg, s);
    EXPECT_EQ(t1.value(g1.total), t2.value(g2.total));
  }
}

TEST(LossDeterminismTest, SeedFixesLossAndGradientBitwise) {
  Batch b = small_batch();
  EbmModel model;
  model.init(13);
  const std::vector<ebmreg::MethodConfig> methods = {
      ebmreg::MlisConfig{8},          ebmreg::KldisConfig{8}, ebmreg::MlMcmcConfig{4, 2, 0.05},
      ebmreg::NceConfig{8},           ebmreg::SmConfig{},     ebmreg::DsmConfig{8},
      ebmreg::NcePlusConfig{8}};
  for (const auto& cfg : methods) {
    Rng r1(500), r2(500), r3(501);
    std::vector<double> grad1, grad2;
    const auto a = ebmreg::loss_and_grad(model, b, cfg, r1, &grad1);
    const auto c = ebmreg::loss_and_grad(model, b, cfg, r2, &grad2);
    EXPECT_EQ(a.total, c.total) << ebmreg::method_name(cfg);
    ASSERT_EQ(grad1.size(), model.param_count());
    for (std::size_t p = 0; p < grad1.size(); ++p) EXPECT_EQ(grad1[p], grad2[p]);

    // total is the mean of the per-example column
    const double mean =
        std::accumulate(a.per_example.begin(), a.per_example.end(), 0.0) /
        static_cast<double>(a.per_example.size());
    EXPECT_NEAR(a.total, mean, 1e-12);

    if (!std::holds_alternative<ebmreg::SmConfig>(cfg)) {
      const auto d = ebmreg::loss_and_grad(model, b, cfg, r3, nullptr);
      EXPECT_NE(a.total, d.total) << ebmreg::method_name(cfg);
    }
  }
}

TEST(LossGradientTest, MatchesCentralDifferences) {
  Batch b = small_batch();
  EbmModel model;
  model.init(19);

  // eps trades truncation error against subtractive cancellation; the squared
  // -residual objective has larger function values, so it gets a larger step.
  auto check = [&](auto&& record, double tol, double eps, const char* name) {
    Tape t(model.theta());
    const auto g = record(t);
    const auto grad = t.backward(g.total);
    ASSERT_GT(max_abs(grad), 1e-6) << name;  // non-vacuous
    auto eval = [&](std::span<const double>) {
      Tape t2(model.theta());
      return t2.value(record(t2).total);
    };
    const double worst = ebmreg::finite_diff_check(eval, model.theta(), grad, eps);
    EXPECT_LT(worst, tol) << name;
  };

  {
    ebmreg::MlisConfig cfg{4};
    Rng rng(61);
    const auto s = ebmreg::draw_proposal_samples(b, cfg.proposal, cfg.m_samples, rng);
    check([&](Tape& t) { return ebmreg::record_loss_ml_is(t, model, b, cfg, s); }, 1e-5, 1e-6,
          "ml-is");
  }
  {
    ebmreg::KldisConfig cfg{4};
    Rng rng(62);
    const auto s = ebmreg::draw_proposal_samples(b, cfg.proposal, cfg.m_samples, rng);
    check([&](Tape& t) { return ebmreg::record_loss_kld_is(t, model, b, cfg, s); }, 1e-5, 1e-6,
          "kld-is");
  }
  {
    // Chain positions are inputs, not parameters: they stay fixed while theta
    // is perturbed.
    ebmreg::MlMcmcConfig cfg{3, 2, 0.05};
    Rng rng(63);
    const auto chains = ebmreg::run_model_chains(model, b, cfg, rng);
    check([&](Tape& t) { return ebmreg::record_loss_ml_mcmc(t, model, b, cfg, chains); }, 1e-5,
          1e-6, "ml-mcmc");
  }
  {
    ebmreg::NceConfig cfg{4};
    Rng rng(64);
    const auto rows = ebmreg::draw_nce_rows(b, cfg, rng);
    check([&](Tape& t) { return ebmreg::record_loss_nce(t, model, b, cfg, rows); }, 1e-5, 1e-6,
          "nce");
  }
  {
    check([&](Tape& t) { return ebmreg::record_loss_sm(t, model, b); }, 1e-4, 1e-6, "sm");
  }
  {
    ebmreg::DsmConfig cfg{4};
    Rng rng(65);
    const auto s = ebmreg::draw_dsm_samples(b, cfg, rng);
    check([&](Tape& t) { return ebmreg::record_loss_dsm(t, model, b, cfg, s); }, 1e-5, 1e-5,
          "dsm");
  }
  {
    ebmreg::NcePlusConfig cfg{4};
    Rng rng(66);
    const auto rows = ebmreg::draw_nce_plus_rows(b, cfg, rng);
    check([&](Tape& t) { return ebmreg::record_loss_nce_plus(t, model, b, cfg, rows); }, 1e-5,
          1e-6, "nce+");
  }
}

// ---- Langevin sampler ----

TEST(LangevinTest, VanishingStepKeepsStart) {
  EbmModel model;
  model.init(37);
  Rng rng(1);
  const double y0 = 1.3;
  const double yL = ebmreg::langevin_chain(model, 0.4, y0, 50, 1e-9, rng);
  EXPECT_NEAR(yL, y0, 1e-6);
}

TEST(LangevinTest, ZeroModelSingleStepIsPureNoise) {
  EbmModel model;  // zero energy everywhere -> zero drift
  Rng rng(321);
  const double y1 = ebmreg::langevin_chain(model, 0.5, 1.25, 1, 0.05, rng);
  Rng replay(321);
  EXPECT_EQ(y1, 1.25 + 0.05 * replay.normal());
}

TEST(LangevinTest, BatchedChainsMatchSequentialReference) {
  Batch b;
  b.x = {-0.8, 1.7};
  b.y = {0.2, -0.6};
  EbmModel model;
  model.init(3);
  ebmreg::MlMcmcConfig cfg{3, 4, 0.05};

  Rng rng(940);
  const auto batched = ebmreg::run_model_chains(model, b, cfg, rng);

  // Reference: one chain at a time, single-lane derivative evaluation, shared
  // pre-drawn noise in chain-major order.
  Rng noise_rng(940);
  std::vector<double> eps(b.size() * cfg.m_samples * cfg.steps);
  noise_rng.normal_fill(eps);
  ebmreg::Workspace ws;
  const double half_aa = 0.5 * cfg.alpha * cfg.alpha;
  std::size_t c = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto xf = model.x_features(b.x[i]);
    for (std::size_t m = 0; m < cfg.m_samples; ++m, ++c) {
      double y = b.y[i];
      for (std::size_t l = 0; l < cfg.steps; ++l) {
        const double d1 = model.forward_dual_with_features(xf, {y, 1.0}, ws).d1;
        y = y + half_aa * d1 + cfg.alpha * eps[c * cfg.steps + l];
      }
      EXPECT_EQ(batched[c], y);
    }
  }
}

TEST(LangevinTest, DivergenceNamesChainAndStep) {
  Rng rng(6);
  const double inf = std::numeric_limits<double>::infinity();
  auto explode = [inf](double) { return inf; };
  try {
    ebmreg::langevin_chain(explode, 0.0, 5, 1.0, rng);
    FAIL() << "expected ChainError";
  } catch (const ChainError& e) {
    EXPECT_EQ(e.step, 0u);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }

  Batch b = small_batch();
  auto explode_rows = [inf](std::size_t, const double*, double* d1, std::size_t count) {
    std::fill(d1, d1 + count, inf);
  };
  Rng rng2(7);
  try {
    ebmreg::run_langevin_chains(explode_rows, b, 2, 3, 1.0, rng2);
    FAIL() << "expected ChainError";
  } catch (const ChainError& e) {
    EXPECT_EQ(e.step, 0u);
    EXPECT_EQ(e.chain, 0u);
  }
}

TEST(LangevinTest, QuadraticStationaryVarianceNearOne) {
  // f = -y^2/2 targets a unit Gaussian; the visited samples of a long chain
  // should have variance within 5% of 1 (small discretization bias included).
  Rng rng(20240817);
  std::vector<double> visited;
  ebmreg::langevin_chain([](double y) { return -y; }, 0.0, 1000000, 0.05, rng, &visited);
  ASSERT_EQ(visited.size(), 1000000u);
  double mean = 0.0;
  for (double v : visited) mean += v;
  mean /= static_cast<double>(visited.size());
  double var = 0.0;
  for (double v : visited) var += (v - mean) * (v - mean);
  var /= static_cast<double>(visited.size() - 1);
  EXPECT_GT(var, 0.95);
  EXPECT_LT(var, 1.05);
}

// ---- error handling ----

TEST(LossErrorsTest, EmptyBatchAndSampleMismatchThrow) {
  EbmModel model;
  Batch empty;
  Rng rng(1);
  EXPECT_THROW(
      ebmreg::loss_and_grad(model, empty, ebmreg::MethodConfig{ebmreg::NceConfig{4}}, rng,
                            nullptr),
      ConfigError);

  Batch b = small_batch();
  ebmreg::NceConfig cfg{4};
  std::vector<double> wrong(3, 0.0);  // needs n * (M + 1) entries
  Tape t(std::span<const double>{});
  ConstantEnergy stub{0.0};
  EXPECT_THROW(ebmreg::record_loss_nce(t, stub, b, cfg, wrong), ConfigError);
}

TEST(LossErrorsTest, NonFiniteLossPoisonsRequestedGradient) {
  // A corruption width so small that sigma^2 underflows to zero makes the
  // residual term 0/0 = NaN. The driver must still return a breakdown, and a
  // requested gradient must be NaN-filled rather than stale.
  Batch b = small_batch();
  EbmModel model;
  model.init(47);
  ebmreg::DsmConfig cfg{4, 1e-300};
  Rng rng(2);
  std::vector<double> grad;
  const auto bk = ebmreg::loss_and_grad(model, b, ebmreg::MethodConfig{cfg}, rng, &grad);
  EXPECT_TRUE(std::isnan(bk.total));
  ASSERT_EQ(grad.size(), model.param_count());
  for (double gv : grad) EXPECT_TRUE(std::isnan(gv));
}

}  // namespace
