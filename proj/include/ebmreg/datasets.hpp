#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebmreg/jet.hpp"
#include "ebmreg/mixture.hpp"
#include "ebmreg/rng.hpp"

namespace ebmreg {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { kDs1, kDs2 };

inline const char* to_string(DatasetKind k) { return k == DatasetKind::kDs1 ? "ds1" : "ds2"; }

inline DatasetKind dataset_from_string(const std::string& s) {
  if (s == "ds1") return DatasetKind::kDs1;
  if (s == "ds2") return DatasetKind::kDs2;
  throw DataError("unknown dataset: " + s + " (expected ds1 or ds2)");
}

// Two synthetic conditional densities over (x, y) with x drawn uniformly
// from [-3, 3]:
//   ds1: for x < 0, a two-component Gaussian mixture (weights 0.2/0.8, the
//        component means and stds are configurable); for x >= 0, a
//        log-normal with mu = 0, sigma = 0.25 (support y > 0).
//   ds2: N(y; sin(x), s(x)^2) with s(x) = 0.15 / (1 + exp(-x)).
struct DatasetSpec {
  DatasetKind kind = DatasetKind::kDs2;
  std::vector<double> ds1_weights{0.2, 0.8};
  std::vector<double> ds1_means{-1.0, 1.0};
  std::vector<double> ds1_stds{0.3, 0.3};
  double ds1_lognormal_mu = 0.0;
  double ds1_lognormal_sigma = 0.25;
  double x_lo = -3.0;
  double x_hi = 3.0;

  GaussianMixture1D neg_mixture() const {
    return GaussianMixture1D(ds1_weights, ds1_means, ds1_stds);
  }
};

inline double ds2_mean(double x) { return std::sin(x); }
inline double ds2_std(double x) { return 0.15 * sigmoid(x); }

// exact ground-truth log p(y|x); -inf where the density is zero
inline double true_logpdf(const DatasetSpec& spec, double x, double y) {
  if (spec.kind == DatasetKind::kDs2) return gaussian_logpdf(y, ds2_mean(x), ds2_std(x));
  if (x < 0.0) return spec.neg_mixture().logpdf(y);
  return lognormal_logpdf(y, spec.ds1_lognormal_mu, spec.ds1_lognormal_sigma);
}

inline double sample_y(const DatasetSpec& spec, double x, Rng& rng) {
  if (spec.kind == DatasetKind::kDs2) return ds2_mean(x) + ds2_std(x) * rng.normal();
  if (x < 0.0) return spec.neg_mixture().sample(rng);
  return lognormal_sample(rng, spec.ds1_lognormal_mu, spec.ds1_lognormal_sigma);
}

struct RegressionSet {
  std::vector<double> x;
  std::vector<double> y;

  std::size_t size() const { return x.size(); }
};

inline RegressionSet generate(const DatasetSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw DataError("generate: n must be >= 1");
  Rng rng(stream_key(kRoleData, seed));
  RegressionSet out;
  out.x.reserve(n);
  out.y.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(spec.x_lo, spec.x_hi);
    out.x.push_back(x);
    out.y.push_back(sample_y(spec, x, rng));
  }
  return out;
}

// 17 significant digits: doubles round-trip exactly through the text form
inline std::string format_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const RegressionSet& set, std::ostream& os) {
  os << "x,y\n";
  for (std::size_t i = 0; i < set.size(); ++i)
    os << format_g17(set.x[i]) << ',' << format_g17(set.y[i]) << '\n';
}

inline void write_csv(const RegressionSet& set, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot open for writing: " + path);
  write_csv(set, os);
  os.flush();
  if (!os) throw DataError("write failed: " + path);
}

inline RegressionSet read_csv(std::istream& is, const std::string& name = "<stream>") {
  std::string line;
  if (!std::getline(is, line)) throw DataError(name + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "x,y") throw DataError(name + ": expected header 'x,y', got '" + line + "'");
  RegressionSet out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos)
      throw DataError(name + ":" + std::to_string(lineno) + ": missing comma");
    std::size_t used = 0;
    double xv, yv;
    try {
      xv = std::stod(line.substr(0, comma), &used);
      if (used != comma) throw std::invalid_argument("trailing");
      const std::string rest = line.substr(comma + 1);
      yv = std::stod(rest, &used);
      if (used != rest.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw DataError(name + ":" + std::to_string(lineno) + ": malformed number");
    }
    out.x.push_back(xv);
    out.y.push_back(yv);
  }
  if (out.size() == 0) throw DataError(name + ": no data rows");
  return out;
}

inline RegressionSet read_csv_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open: " + path);
  return read_csv(is, path);
}

}  // namespace ebmreg
