#include "ebmreg/tape.hpp"

#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <vector>

#include "ebmreg/gradcheck.hpp"
#include "ebmreg/jet.hpp"

namespace {

using ebmreg::finite_diff_check;
using ebmreg::GradVector;
using ebmreg::Jet2;
using ebmreg::NodeId;
using ebmreg::Tape;
using ebmreg::TapeError;

// d(t0 * t1) = (t1, t0); frozen: at theta = (2, 5) value 10, grad (5, 2)
TEST(TapeTest, ProductOfTwoParams) {
  std::vector<double> theta{2.0, 5.0};
  Tape t(theta);
  const NodeId p0 = t.param(0);
  const NodeId p1 = t.param(1);
  const NodeId m = t.mul(p0, p1);
  EXPECT_EQ(t.value(m), 10.0);
  const GradVector g = t.backward(m);
  EXPECT_EQ(g[0], 5.0);
  EXPECT_EQ(g[1], 2.0);
}

// logsumexp(0, 0) = log 2 with gradient (1/2, 1/2)
TEST(TapeTest, LogSumExpUniform) {
  std::vector<double> theta{0.0, 0.0};
  Tape t(theta);
  const std::array<NodeId, 2> ps{t.param(0), t.param(1)};
  const NodeId l = t.logsumexp(ps);
  EXPECT_DOUBLE_EQ(t.value(l), std::log(2.0));
  const GradVector g = t.backward(l);
  EXPECT_EQ(g[0], 0.5);
  EXPECT_EQ(g[1], 0.5);
}

// max subtraction keeps huge magnitudes finite; softmax saturates to (1, 0)
TEST(TapeTest, LogSumExpStability) {
  std::vector<double> theta{1000.0, -1000.0};
  Tape t(theta);
  const std::array<NodeId, 2> ps{t.param(0), t.param(1)};
  const NodeId l = t.logsumexp(ps);
  EXPECT_TRUE(std::isfinite(t.value(l)));
  EXPECT_NEAR(t.value(l), 1000.0, 1e-12);
  const GradVector g = t.backward(l);
  EXPECT_NEAR(g[0], 1.0, 1e-12);
  EXPECT_NEAR(g[1], 0.0, 1e-12);
}

// offsets shift each flattened element before exponentiation:
// logsumexp(t0 + log 0.25, t0 + log 0.75) = t0 + log 1 = t0
TEST(TapeTest, LogSumExpOffsets) {
  std::vector<double> theta{1.7};
  Tape t(theta);
  const std::array<NodeId, 2> ps{t.param(0), t.param(0)};
  const std::array<double, 2> off{std::log(0.25), std::log(0.75)};
  const NodeId l = t.logsumexp(ps, off);
  EXPECT_NEAR(t.value(l), 1.7, 1e-15);
  const GradVector g = t.backward(l);
  EXPECT_NEAR(g[0], 1.0, 1e-15);
}

// Jet payloads: square of the seeded coordinate at y = 3 is (9, 6, 2); the
// derivative extracts expose each lane to the reverse sweep.
// f(theta, y) = theta * y^2 at theta = 3, y = 3:
//   d/dtheta of f        = y^2  = 9
//   d/dtheta of df/dy    = 2y   = 6
//   d/dtheta of d2f/dy2  = 2
TEST(TapeTest, ReverseOverForward) {
  std::vector<double> theta{3.0};
  Tape t(theta);
  const NodeId y = t.constant_jet(Jet2::seed(3.0));
  const NodeId sq = t.mul(y, y);
  const Jet2 s = t.jet(sq);
  EXPECT_EQ(s.v, 9.0);
  EXPECT_EQ(s.d1, 6.0);
  EXPECT_EQ(s.d2, 2.0);

  const NodeId f = t.mul(t.param(0), sq);
  const Jet2 fj = t.jet(f);
  EXPECT_EQ(fj.v, 27.0);
  EXPECT_EQ(fj.d1, 18.0);
  EXPECT_EQ(fj.d2, 6.0);

  EXPECT_EQ(t.backward(t.jet_value(f))[0], 9.0);
  EXPECT_EQ(t.backward(t.jet_d1(f))[0], 6.0);
  EXPECT_EQ(t.backward(t.jet_d2(f))[0], 2.0);
}

TEST(TapeTest, ConstantJetRowReads) {
  std::vector<double> theta{0.0};
  Tape t(theta);
  const std::array<double, 3> ys{-1.0, 0.0, 2.5};
  const NodeId r = t.constant_jet_row(ys, 1.0, 0.0);
  ASSERT_TRUE(t.is_jet(r));
  ASSERT_EQ(t.length(r), 3u);
  for (std::uint32_t i = 0; i < 3; ++i) {
    const Jet2 j = t.jet_at(r, i);
    EXPECT_EQ(j.v, ys[i]);
    EXPECT_EQ(j.d1, 1.0);
    EXPECT_EQ(j.d2, 0.0);
  }
  // v plane is what values() exposes
  EXPECT_EQ(t.values(r)[2], 2.5);
}

// hand-worked affine: W = [[1,2],[3,4]], b = (0.5, -0.5), input (1, 2)
// -> (1 + 4 + 0.5, 3 + 8 - 0.5) = (5.5, 10.5); with unit weights on both
// outputs, gW = [[1,2],[1,2]], gb = (1,1)
TEST(TapeTest, AffineHandComputed) {
  std::vector<double> theta{1.0, 2.0, 3.0, 4.0, 0.5, -0.5};
  Tape t(theta);
  const std::array<double, 2> in{1.0, 2.0};
  const NodeId x = t.constant_row(in);
  const NodeId h = t.affine(x, 0, 4, 2, 2);
  EXPECT_EQ(t.values(h)[0], 5.5);
  EXPECT_EQ(t.values(h)[1], 10.5);
  const std::array<NodeId, 1> hs{h};
  const std::array<double, 2> w{1.0, 1.0};
  const NodeId root = t.lincomb(hs, w);
  EXPECT_EQ(t.value(root), 16.0);
  const GradVector g = t.backward(root);
  EXPECT_EQ(g[0], 1.0);
  EXPECT_EQ(g[1], 2.0);
  EXPECT_EQ(g[2], 1.0);
  EXPECT_EQ(g[3], 2.0);
  EXPECT_EQ(g[4], 1.0);
  EXPECT_EQ(g[5], 1.0);
}

// grouped rows: two lanes (3, 4) through a (2 x 1) map W = (2, -1),
// b = (0.5, 0): out[j,m] = b_j + W_j y_m -> (6.5, 8.5 | -3, -4);
// unit adjoints give gW_j = 3 + 4 = 7, gb_j = 2
TEST(TapeTest, AffineGroupedLanes) {
  std::vector<double> theta{2.0, -1.0, 0.5, 0.0};
  Tape t(theta);
  const std::array<double, 2> lanes{3.0, 4.0};
  const NodeId y = t.constant_row(lanes);
  const NodeId h = t.affine(y, 0, 2, 2, 1);
  ASSERT_EQ(t.length(h), 4u);
  EXPECT_EQ(t.values(h)[0], 6.5);
  EXPECT_EQ(t.values(h)[1], 8.5);
  EXPECT_EQ(t.values(h)[2], -3.0);
  EXPECT_EQ(t.values(h)[3], -4.0);
  const std::array<NodeId, 1> hs{h};
  const std::array<double, 4> w{1.0, 1.0, 1.0, 1.0};
  const GradVector g = t.backward(t.lincomb(hs, w));
  EXPECT_EQ(g[0], 7.0);
  EXPECT_EQ(g[1], 7.0);
  EXPECT_EQ(g[2], 2.0);
  EXPECT_EQ(g[3], 2.0);
}

// two-input affine with broadcast first input x = (2):
// W1 = (1, -2), W2 = (3, 4), b = (0.1, 0.2), lanes y = (1, -1)
// row 0: 0.1 + 2 + 3 y -> (5.1, -0.9); row 1: 0.2 - 4 + 4 y -> (0.2, -7.8)
// weights (1, 2, 1, 2): value = 5.1 - 1.8 + 0.2 - 15.6 = -12.1
// adjoint per row = (1, 2) so row sums are 3: gb = (3, 3), gW1 = (6, 6),
// gW2_j = 1*1 + 2*(-1) = -1
TEST(TapeTest, Affine2HandComputed) {
  std::vector<double> theta{1.0, -2.0, 3.0, 4.0, 0.1, 0.2};
  Tape t(theta);
  const std::array<double, 1> xv{2.0};
  const std::array<double, 2> yv{1.0, -1.0};
  const NodeId x = t.constant_row(xv);
  const NodeId y = t.constant_row(yv);
  const NodeId h = t.affine2(x, y, 0, 2, 4, 2, 1, 1);
  ASSERT_EQ(t.length(h), 4u);
  // expected expressions replicate the evaluation order (bias + broadcast
  // first, then the lane term) so the comparison is exact
  EXPECT_EQ(t.values(h)[0], 0.1 + 2.0 + 3.0);
  EXPECT_EQ(t.values(h)[1], 0.1 + 2.0 - 3.0);
  EXPECT_EQ(t.values(h)[2], 0.2 - 4.0 + 4.0);
  EXPECT_EQ(t.values(h)[3], 0.2 - 4.0 - 4.0);
  const std::array<NodeId, 1> hs{h};
  const std::array<double, 4> w{1.0, 2.0, 1.0, 2.0};
  const NodeId root = t.lincomb(hs, w);
  EXPECT_NEAR(t.value(root), -12.1, 1e-12);
  const GradVector g = t.backward(root);
  EXPECT_EQ(g[0], 6.0);
  EXPECT_EQ(g[1], 6.0);
  EXPECT_EQ(g[2], -1.0);
  EXPECT_EQ(g[3], -1.0);
  EXPECT_EQ(g[4], 3.0);
  EXPECT_EQ(g[5], 3.0);
}

// taped nonlinearities on jet rows must match the scalar jet algebra bitwise
// (they share the same kernels)
TEST(TapeTest, JetNonlinearitiesMatchScalarAlgebra) {
  std::vector<double> theta{0.0};
  for (const double v : {-2.0, -0.5, 0.0, 0.3, 1.7}) {
    Tape t(theta);
    const NodeId y = t.constant_jet(Jet2::seed(v));
    const Jet2 seed = Jet2::seed(v);
    EXPECT_EQ(t.jet(t.relu(y)).v, relu(seed).v);
    EXPECT_EQ(t.jet(t.relu(y)).d1, relu(seed).d1);
    const Jet2 sp_t = t.jet(t.softplus(y));
    const Jet2 sp_s = softplus(seed);
    EXPECT_EQ(sp_t.v, sp_s.v);
    EXPECT_EQ(sp_t.d1, sp_s.d1);
    EXPECT_EQ(sp_t.d2, sp_s.d2);
    const NodeId e = t.exp(t.mul_imm(y, 0.5));
    const Jet2 e_s = exp(seed * 0.5);
    EXPECT_EQ(t.jet(e).v, e_s.v);
    EXPECT_EQ(t.jet(e).d1, e_s.d1);
    EXPECT_EQ(t.jet(e).d2, e_s.d2);
  }
}

// mixed real/jet arithmetic: a real row entering a jet product contributes a
// constant (zero-derivative) factor
TEST(TapeTest, MixedRealJetArithmetic) {
  std::vector<double> theta{2.5};
  Tape t(theta);
  const NodeId y = t.constant_jet(Jet2::seed(3.0));
  const NodeId p = t.param(0);
  const NodeId prod = t.mul(p, y);  // 2.5 * y
  const Jet2 j = t.jet(prod);
  EXPECT_EQ(j.v, 7.5);
  EXPECT_EQ(j.d1, 2.5);
  EXPECT_EQ(j.d2, 0.0);
  const NodeId s = t.add(p, y);
  const Jet2 js = t.jet(s);
  EXPECT_EQ(js.v, 5.5);
  EXPECT_EQ(js.d1, 1.0);
  EXPECT_EQ(js.d2, 0.0);
  // d/dtheta of d(theta y)/dy = 1
  EXPECT_EQ(t.backward(t.jet_d1(prod))[0], 1.0);
  // d/dtheta of d(theta + y)/dy = 0
  EXPECT_EQ(t.backward(t.jet_d1(s))[0], 0.0);
}

double rebuild_composite(std::span<const double> theta) {
  Tape t(theta);
  const std::array<double, 3> in{0.3, -0.7, 1.2};
  const NodeId x = t.constant_row(in);
  const NodeId h1 = t.relu(t.affine(x, 0, 6, 2, 3));
  const NodeId h2 = t.softplus(t.affine(h1, 8, 12, 2, 2));
  const NodeId e = t.exp(t.mul_imm(h2, 0.25));
  const NodeId lg = t.log(t.add_imm(h2, 1.5));
  const NodeId joined = t.add(e, lg);
  const std::array<NodeId, 2> parts{joined, h2};
  const std::array<double, 4> off{0.1, -0.2, 0.0, 0.3};
  const NodeId lse = t.logsumexp(parts, off);
  const NodeId prod = t.mul(t.index(joined, 0), t.index(h2, 1));
  return t.value(t.lincomb(std::array<NodeId, 2>{lse, prod}, std::array<double, 2>{1.0, 0.5},
                           0.25));
}

// every real-payload op in one graph, checked against central differences
TEST(TapeTest, FiniteDifferenceRealGraph) {
  std::vector<double> theta{0.4,  -0.3, 0.8, 0.2, -0.6, 0.5, 0.1, -0.1,
                            -0.7, 0.9,  0.3, 0.6, 0.05, -0.4};
  GradVector g;
  {
    Tape t(theta);
    const std::array<double, 3> in{0.3, -0.7, 1.2};
    const NodeId x = t.constant_row(in);
    const NodeId h1 = t.relu(t.affine(x, 0, 6, 2, 3));
    const NodeId h2 = t.softplus(t.affine(h1, 8, 12, 2, 2));
    const NodeId e = t.exp(t.mul_imm(h2, 0.25));
    const NodeId lg = t.log(t.add_imm(h2, 1.5));
    const NodeId joined = t.add(e, lg);
    const std::array<NodeId, 2> parts{joined, h2};
    const std::array<double, 4> off{0.1, -0.2, 0.0, 0.3};
    const NodeId lse = t.logsumexp(parts, off);
    const NodeId prod = t.mul(t.index(joined, 0), t.index(h2, 1));
    const NodeId root = t.lincomb(std::array<NodeId, 2>{lse, prod},
                                  std::array<double, 2>{1.0, 0.5}, 0.25);
    g = t.backward(root);
  }
  double mx = 0.0;
  for (double v : g) mx = std::max(mx, std::abs(v));
  ASSERT_GT(mx, 1e-3);  // non-vacuous
  const double err = finite_diff_check(rebuild_composite, theta, g, 1e-6);
  EXPECT_LT(err, 1e-6);
}

double rebuild_jet_graph(std::span<const double> theta) {
  Tape t(theta);
  const std::array<double, 2> lanes{0.6, -1.1};
  const NodeId y = t.constant_jet_row(lanes, 1.0, 0.0);
  const NodeId h = t.softplus(t.affine(y, 0, 2, 2, 1));
  const NodeId h2 = t.affine(h, 4, 6, 1, 2);
  const NodeId sq = t.mul(h2, h2);
  const NodeId d1 = t.jet_d1(sq);
  const NodeId d2 = t.jet_d2(h2);
  const NodeId mixed = t.mul(d1, d2);
  return t.value(t.lincomb(std::array<NodeId, 1>{mixed}, std::array<double, 2>{1.0, 2.0}));
}

// reverse sweep through jet planes (the second-order forward lanes), checked
// against central differences on theta
TEST(TapeTest, FiniteDifferenceJetGraph) {
  std::vector<double> theta{0.9, -0.8, 0.15, -0.05, 0.7, -0.6, 0.35};
  GradVector g;
  {
    Tape t(theta);
    const std::array<double, 2> lanes{0.6, -1.1};
    const NodeId y = t.constant_jet_row(lanes, 1.0, 0.0);
    const NodeId h = t.softplus(t.affine(y, 0, 2, 2, 1));
    const NodeId h2 = t.affine(h, 4, 6, 1, 2);
    const NodeId sq = t.mul(h2, h2);
    const NodeId d1 = t.jet_d1(sq);
    const NodeId d2 = t.jet_d2(h2);
    const NodeId mixed = t.mul(d1, d2);
    g = t.backward(t.lincomb(std::array<NodeId, 1>{mixed}, std::array<double, 2>{1.0, 2.0}));
  }
  double mx = 0.0;
  for (double v : g) mx = std::max(mx, std::abs(v));
  ASSERT_GT(mx, 1e-3);
  const double err = finite_diff_check(rebuild_jet_graph, theta, g, 1e-6);
  EXPECT_LT(err, 1e-6);
}

// a NaN produced in the forward pass surfaces during backward as a NaN
// adjoint, reported with the node it landed on
TEST(TapeTest, NanAdjointReportsNodeIndex) {
  std::vector<double> theta{-1.0, 2.0};
  Tape t(theta);
  const NodeId p0 = t.param(0);        // node 0
  const NodeId bad = t.log(p0);        // node 1: log(-1) = NaN
  const NodeId p1 = t.param(1);        // node 2
  const NodeId root = t.mul(bad, p1);  // node 3
  EXPECT_TRUE(std::isnan(t.value(bad)));
  try {
    t.backward(root);
    FAIL() << "expected TapeError";
  } catch (const TapeError& e) {
    EXPECT_EQ(e.node_id, 2u);  // the NaN lands on p1's adjoint (bar * NaN)
  }
}

TEST(TapeTest, UntouchedParamsHaveZeroGradient) {
  std::vector<double> theta{1.0, 2.0, 3.0};
  Tape t(theta);
  const NodeId root = t.mul(t.param(0), t.param(0));
  const GradVector g = t.backward(root);
  EXPECT_EQ(g[0], 2.0);
  EXPECT_EQ(g[1], 0.0);
  EXPECT_EQ(g[2], 0.0);
}

// rebuilding the same graph over the same theta reproduces every value and
// gradient entry bitwise
TEST(TapeTest, ReplayIsBitwise) {
  std::vector<double> theta{0.4, -0.3, 0.8, 0.2, -0.6, 0.5, 0.1, -0.1,
                            -0.7, 0.9, 0.3, 0.6, 0.05, -0.4};
  const double v1 = rebuild_composite(theta);
  const double v2 = rebuild_composite(theta);
  EXPECT_EQ(v1, v2);
  auto grad_of = [&theta]() {
    Tape t(theta);
    const std::array<double, 3> in{0.3, -0.7, 1.2};
    const NodeId x = t.constant_row(in);
    const NodeId h1 = t.relu(t.affine(x, 0, 6, 2, 3));
    const NodeId h2 = t.softplus(t.affine(h1, 8, 12, 2, 2));
    const std::array<NodeId, 1> parts{h2};
    return t.backward(t.logsumexp(parts));
  };
  const GradVector g1 = grad_of();
  const GradVector g2 = grad_of();
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

TEST(TapeTest, ShapeAndKindErrors) {
  std::vector<double> theta{1.0, 2.0};
  Tape t(theta);
  const NodeId jet = t.constant_jet(Jet2::seed(1.0));
  const NodeId real2 = t.constant_row(std::array<double, 2>{1.0, 2.0});
  EXPECT_THROW((void)t.value(jet), TapeError);
  EXPECT_THROW((void)t.jet(real2), TapeError);
  EXPECT_THROW((void)t.index(jet, 0), TapeError);
  EXPECT_THROW((void)t.index(real2, 5), TapeError);
  EXPECT_THROW((void)t.param(2), TapeError);
  EXPECT_THROW((void)t.add(jet, real2), TapeError);      // length mismatch
  EXPECT_THROW((void)t.jet_d1(real2), TapeError);        // not a jet
  EXPECT_THROW((void)t.backward(jet), TapeError);        // root must be real
  EXPECT_THROW((void)t.affine(real2, 0, 1, 2, 2), TapeError);  // theta slice
}

}  // namespace
