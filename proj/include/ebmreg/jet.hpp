#pragma once

#include <cassert>
#include <cmath>

namespace ebmreg {

// Truncated second-order Taylor triple of a scalar curve t -> y(t):
// v = y, d1 = y', d2 = y''. Seeding (y0, 1, 0) turns any scalar computation
// built from the overloads below into (f, df/dy, d2f/dy2) evaluated at y0.
struct Jet2 {
  double v = 0.0;
  double d1 = 0.0;
  double d2 = 0.0;

  static constexpr Jet2 seed(double y0) { return {y0, 1.0, 0.0}; }
  static constexpr Jet2 constant(double c) { return {c, 0.0, 0.0}; }
};

// First-order truncation of the same algebra. Its (v, d1) lanes follow the
// exact same update rules as Jet2, so a computation that never reads d2 gives
// bitwise-identical first derivatives in either type.
struct Dual {
  double v = 0.0;
  double d1 = 0.0;

  static constexpr Dual seed(double y0) { return {y0, 1.0}; }
  static constexpr Dual constant(double c) { return {c, 0.0}; }
};

constexpr Jet2 operator+(Jet2 a, Jet2 b) { return {a.v + b.v, a.d1 + b.d1, a.d2 + b.d2}; }
constexpr Jet2 operator-(Jet2 a, Jet2 b) { return {a.v - b.v, a.d1 - b.d1, a.d2 - b.d2}; }
constexpr Jet2 operator-(Jet2 a) { return {-a.v, -a.d1, -a.d2}; }
constexpr Jet2 operator+(Jet2 a, double c) { return {a.v + c, a.d1, a.d2}; }
constexpr Jet2 operator+(double c, Jet2 a) { return a + c; }
constexpr Jet2 operator-(Jet2 a, double c) { return {a.v - c, a.d1, a.d2}; }
constexpr Jet2 operator-(double c, Jet2 a) { return {c - a.v, -a.d1, -a.d2}; }

// (ab)'' = a''b + 2a'b' + ab''
constexpr Jet2 operator*(Jet2 a, Jet2 b) {
  return {a.v * b.v, a.v * b.d1 + a.d1 * b.v, a.v * b.d2 + 2.0 * a.d1 * b.d1 + a.d2 * b.v};
}
constexpr Jet2 operator*(Jet2 a, double c) { return {a.v * c, a.d1 * c, a.d2 * c}; }
constexpr Jet2 operator*(double c, Jet2 a) { return a * c; }

// q = a/b resolved from a = qb: q' = (a' - qb')/b, q'' = (a'' - 2q'b' - qb'')/b
constexpr Jet2 operator/(Jet2 a, Jet2 b) {
  assert(b.v != 0.0);
  const double q = a.v / b.v;
  const double q1 = (a.d1 - q * b.d1) / b.v;
  const double q2 = (a.d2 - 2.0 * q1 * b.d1 - q * b.d2) / b.v;
  return {q, q1, q2};
}
constexpr Jet2 operator/(Jet2 a, double c) { return {a.v / c, a.d1 / c, a.d2 / c}; }
constexpr Jet2 operator/(double c, Jet2 b) { return Jet2::constant(c) / b; }

// chain rule for h = g(u): h' = g'(u)u', h'' = g'(u)u'' + g''(u)u'^2
inline Jet2 exp(Jet2 a) {
  const double e = std::exp(a.v);
  return {e, e * a.d1, e * a.d2 + e * a.d1 * a.d1};
}

inline Jet2 log(Jet2 a) {
  assert(a.v > 0.0);
  const double g1 = 1.0 / a.v;
  return {std::log(a.v), g1 * a.d1, g1 * a.d2 - g1 * g1 * a.d1 * a.d1};
}

inline Jet2 sin(Jet2 a) {
  const double s = std::sin(a.v);
  const double c = std::cos(a.v);
  return {s, c * a.d1, c * a.d2 - s * a.d1 * a.d1};
}

inline Jet2 cos(Jet2 a) {
  const double s = std::sin(a.v);
  const double c = std::cos(a.v);
  return {c, -s * a.d1, -s * a.d2 - c * a.d1 * a.d1};
}

inline Jet2 sqrt(Jet2 a) {
  assert(a.v > 0.0);
  const double r = std::sqrt(a.v);
  const double g1 = 0.5 / r;
  return {r, g1 * a.d1, g1 * a.d2 - 0.25 / (r * a.v) * a.d1 * a.d1};
}

// slope 0 on the closed negative half-line; kink treated one-sidedly
constexpr Jet2 relu(Jet2 a) {
  return a.v > 0.0 ? a : Jet2{0.0, 0.0, 0.0};
}

inline double softplus(double v) {
  // log(1 + e^v) evaluated without overflow on either tail
  return v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
}

inline double sigmoid(double v) {
  return v > 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

inline Jet2 softplus(Jet2 a) {
  const double s = sigmoid(a.v);     // g'  = sigma
  const double s1 = s * (1.0 - s);   // g'' = sigma(1 - sigma)
  return {softplus(a.v), s * a.d1, s * a.d2 + s1 * (a.d1 * a.d1)};
}

constexpr Dual operator+(Dual a, Dual b) { return {a.v + b.v, a.d1 + b.d1}; }
constexpr Dual operator-(Dual a, Dual b) { return {a.v - b.v, a.d1 - b.d1}; }
constexpr Dual operator-(Dual a) { return {-a.v, -a.d1}; }
constexpr Dual operator+(Dual a, double c) { return {a.v + c, a.d1}; }
constexpr Dual operator+(double c, Dual a) { return a + c; }
constexpr Dual operator-(Dual a, double c) { return {a.v - c, a.d1}; }
constexpr Dual operator*(Dual a, Dual b) { return {a.v * b.v, a.v * b.d1 + a.d1 * b.v}; }
constexpr Dual operator*(Dual a, double c) { return {a.v * c, a.d1 * c}; }
constexpr Dual operator*(double c, Dual a) { return a * c; }

constexpr Dual relu(Dual a) { return a.v > 0.0 ? a : Dual{0.0, 0.0}; }

inline Dual softplus(Dual a) { return {softplus(a.v), sigmoid(a.v) * a.d1}; }

// Evaluates a scalar expression f at y0 with a derivative seed, returning
// (f(y0), f'(y0), f''(y0)). Expressions may use any overload defined above;
// anything else fails to compile.
template <class F>
Jet2 jet_eval(F&& f, double y0) {
  return f(Jet2::seed(y0));
}

}  // namespace ebmreg
