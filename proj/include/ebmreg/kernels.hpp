#pragma once

#include <cmath>
#include <cstdint>

namespace ebmreg::kernels {

// Dense affine kernels over row-major activations: a payload of in_dim rows
// by group cols holds element (k, m) at in[k * group + m], so the inner loops
// run over contiguous memory. The kernels are the single arithmetic path for
// every forward flavor (plain, first- and second-order jet planes, taped), so
// value lanes agree bitwise across flavors. noinline keeps one codegen site.

// out[j,m] = b[j] + sum_k W[j,k] * in[k,m];  pass b = nullptr to init to 0
[[gnu::noinline]] inline void affine_forward(const double* W, const double* b,
                                             const double* in, double* out,
                                             std::uint32_t out_dim, std::uint32_t in_dim,
                                             std::uint32_t group) {
  for (std::uint32_t j = 0; j < out_dim; ++j) {
    double* o = out + j * group;
    const double bj = b ? b[j] : 0.0;
    for (std::uint32_t m = 0; m < group; ++m) o[m] = bj;
    const double* wrow = W + j * in_dim;
    for (std::uint32_t k = 0; k < in_dim; ++k) {
      const double w = wrow[k];
      const double* i = in + k * group;
      for (std::uint32_t m = 0; m < group; ++m) o[m] += w * i[m];
    }
  }
}

// out[j,m] += sum_k W[j,k] * in[k,m]
[[gnu::noinline]] inline void affine_forward_acc(const double* W, const double* in,
                                                 double* out, std::uint32_t out_dim,
                                                 std::uint32_t in_dim, std::uint32_t group) {
  for (std::uint32_t j = 0; j < out_dim; ++j) {
    double* o = out + j * group;
    const double* wrow = W + j * in_dim;
    for (std::uint32_t k = 0; k < in_dim; ++k) {
      const double w = wrow[k];
      const double* i = in + k * group;
      for (std::uint32_t m = 0; m < group; ++m) o[m] += w * i[m];
    }
  }
}

// hbar[k,m] += sum_j W[j,k] * abar[j,m]
[[gnu::noinline]] inline void affine_backward_input(const double* W, const double* abar,
                                                    double* hbar, std::uint32_t out_dim,
                                                    std::uint32_t in_dim, std::uint32_t group) {
  for (std::uint32_t k = 0; k < in_dim; ++k) {
    double* h = hbar + k * group;
    for (std::uint32_t j = 0; j < out_dim; ++j) {
      const double w = W[j * in_dim + k];
      const double* a = abar + j * group;
      for (std::uint32_t m = 0; m < group; ++m) h[m] += w * a[m];
    }
  }
}

// fixed-order four-lane partial sums: deterministic and SLP-friendly
[[gnu::noinline]] inline double dot(const double* a, const double* b, std::uint32_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::uint32_t m = 0;
  for (; m + 4 <= n; m += 4) {
    s0 += a[m] * b[m];
    s1 += a[m + 1] * b[m + 1];
    s2 += a[m + 2] * b[m + 2];
    s3 += a[m + 3] * b[m + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; m < n; ++m) s += a[m] * b[m];
  return s;
}

[[gnu::noinline]] inline double row_sum(const double* a, std::uint32_t n) {
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  std::uint32_t m = 0;
  for (; m + 4 <= n; m += 4) {
    s0 += a[m];
    s1 += a[m + 1];
    s2 += a[m + 2];
    s3 += a[m + 3];
  }
  double s = (s0 + s1) + (s2 + s3);
  for (; m < n; ++m) s += a[m];
  return s;
}

// gW[j,k] += sum_m abar[j,m] * h[k,m];  gb[j] += sum_m abar[j,m] (skipped when null)
[[gnu::noinline]] inline void affine_backward_params(const double* abar, const double* h,
                                                     double* gW, double* gb,
                                                     std::uint32_t out_dim, std::uint32_t in_dim,
                                                     std::uint32_t group) {
  for (std::uint32_t j = 0; j < out_dim; ++j) {
    const double* a = abar + j * group;
    for (std::uint32_t k = 0; k < in_dim; ++k) gW[j * in_dim + k] += dot(a, h + k * group, group);
    if (gb) gb[j] += row_sum(a, group);
  }
}

// Nonlinearities over jet planes. Derivative plane pointers may be null
// (plain / first-order use). in == out aliasing is allowed; every lane is
// element-local. These are the only nonlinearity code paths, shared by the
// taped forward and all plain forward flavors.

// gate from the strict sign of v; recoverable from the output, so the v plane
// is safe to overwrite first
[[gnu::noinline]] inline void relu_rows(const double* vi, double* vo, const double* d1i,
                                        double* d1o, const double* d2i, double* d2o,
                                        std::uint32_t n) {
  for (std::uint32_t e = 0; e < n; ++e) vo[e] = vi[e] > 0.0 ? vi[e] : 0.0;
  if (d1o)
    for (std::uint32_t e = 0; e < n; ++e) d1o[e] = vo[e] > 0.0 ? d1i[e] : 0.0;
  if (d2o)
    for (std::uint32_t e = 0; e < n; ++e) d2o[e] = vo[e] > 0.0 ? d2i[e] : 0.0;
}

// softplus with sigma from one shared exp; d2 = s*d2 + s(1-s)*d1^2
[[gnu::noinline]] inline void softplus_rows(const double* vi, double* vo, const double* d1i,
                                            double* d1o, const double* d2i, double* d2o,
                                            std::uint32_t n) {
  for (std::uint32_t e = 0; e < n; ++e) {
    const double v = vi[e];
    double sp, s;
    if (v > 0.0) {
      const double t = std::exp(-v);
      sp = v + std::log1p(t);
      s = 1.0 / (1.0 + t);
    } else {
      const double t = std::exp(v);
      sp = std::log1p(t);
      s = t / (1.0 + t);
    }
    if (d2o) {
      const double d1 = d1i[e];
      d2o[e] = s * d2i[e] + (s * (1.0 - s)) * (d1 * d1);
    }
    if (d1o) d1o[e] = s * d1i[e];
    vo[e] = sp;
  }
}

}  // namespace ebmreg::kernels
