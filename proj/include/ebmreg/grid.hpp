// Grid-based density evaluation and the grid KL metric.
//
// Densities live on a uniform cell-center grid over a rectangle of (x, y)
// values.  Each x-column is normalized independently (logsumexp plus the cell
// width), so a raw energy f(x, y) becomes a proper conditional density
// p(y | x) column by column.  The KL routine compares two densities on the
// same grid, treating zero-mass reference cells as contributing nothing.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "ebmreg/datasets.hpp"
#include "ebmreg/errors.hpp"
#include "ebmreg/model.hpp"

namespace ebmreg {

// One uniform axis of cell centers: center(j) = lo + (j + 1/2) * (hi - lo) / cells.
struct GridAxis {
  double lo = -3.0;
  double hi = 3.0;
  std::size_t cells = 2048;

  void validate() const {
    if (!(lo < hi) || !std::isfinite(lo) || !std::isfinite(hi)) {
      throw ConfigError("grid axis requires finite lo < hi");
    }
    if (cells == 0) throw ConfigError("grid axis requires at least one cell");
  }
  double delta() const { return (hi - lo) / static_cast<double>(cells); }
  double center(std::size_t j) const { return lo + (static_cast<double>(j) + 0.5) * delta(); }
  std::vector<double> centers() const {
    std::vector<double> c(cells);
    for (std::size_t j = 0; j < cells; ++j) c[j] = center(j);
    return c;
  }
  bool operator==(const GridAxis&) const = default;
};

// A per-column-normalized log density table.  logp is x-major: the column for
// x_grid[ix] occupies logp[ix * ny() .. ix * ny() + ny()).  Cells with no mass
// hold -infinity.  For every column, sum_iy exp(logp) * y_delta == 1.
struct GridDensity {
  std::vector<double> x_grid;
  std::vector<double> y_grid;
  std::vector<double> logp;
  double y_delta = 0.0;

  std::size_t nx() const { return x_grid.size(); }
  std::size_t ny() const { return y_grid.size(); }
  double log_density(std::size_t ix, std::size_t iy) const { return logp[ix * ny() + iy]; }
  // Probability mass of one cell (density times cell width).
  double mass(std::size_t ix, std::size_t iy) const {
    return std::exp(log_density(ix, iy)) * y_delta;
  }
};

namespace detail {

// Shifts one raw log-density column so that sum exp(col) * dy == 1.
inline void normalize_column(double* col, std::size_t n, double dy) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, col[j]);
  if (!std::isfinite(mx)) {
    throw ConfigError("grid column has no probability mass to normalize");
  }
  double acc = 0.0;
  for (std::size_t j = 0; j < n; ++j) acc += std::exp(col[j] - mx);
  const double log_z = mx + std::log(acc) + std::log(dy);
  for (std::size_t j = 0; j < n; ++j) col[j] -= log_z;
}

}  // namespace detail

// Evaluates an arbitrary log-density (or raw energy) callable on the grid and
// normalizes each x-column.  -infinity values are allowed and keep zero mass.
template <class LogF>
  requires std::is_invocable_r_v<double, LogF&, double, double>
GridDensity grid_density_from(LogF&& logf, GridAxis x_axis = {}, GridAxis y_axis = {}) {
  x_axis.validate();
  y_axis.validate();
  GridDensity gd;
  gd.x_grid = x_axis.centers();
  gd.y_grid = y_axis.centers();
  gd.y_delta = y_axis.delta();
  gd.logp.resize(gd.nx() * gd.ny());
  for (std::size_t ix = 0; ix < gd.nx(); ++ix) {
    double* col = gd.logp.data() + ix * gd.ny();
    for (std::size_t iy = 0; iy < gd.ny(); ++iy) col[iy] = logf(gd.x_grid[ix], gd.y_grid[iy]);
    detail::normalize_column(col, gd.ny(), gd.y_delta);
  }
  return gd;
}

// Evaluates the learned energy on the grid, one batched column per x value.
inline GridDensity grid_density_model(const EbmModel& model, GridAxis x_axis = {},
                                      GridAxis y_axis = {}) {
  x_axis.validate();
  y_axis.validate();
  for (double v : model.theta()) {
    if (!std::isfinite(v)) throw ConfigError("model parameters must be finite");
  }
  GridDensity gd;
  gd.x_grid = x_axis.centers();
  gd.y_grid = y_axis.centers();
  gd.y_delta = y_axis.delta();
  gd.logp.resize(gd.nx() * gd.ny());
  Workspace ws;
  for (std::size_t ix = 0; ix < gd.nx(); ++ix) {
    double* col = gd.logp.data() + ix * gd.ny();
    const auto xf = model.x_features(gd.x_grid[ix]);
    model.energy_rows<1>(xf, gd.y_grid.data(), col, static_cast<std::uint32_t>(gd.ny()), ws);
    detail::normalize_column(col, gd.ny(), gd.y_delta);
  }
  return gd;
}

// Same grid pipeline applied to the exact data-generating density.
inline GridDensity grid_density_truth(const DatasetSpec& spec, GridAxis x_axis = {},
                                      GridAxis y_axis = {}) {
  return grid_density_from([&spec](double x, double y) { return true_logpdf(spec, x, y); },
                           x_axis, y_axis);
}

struct KlResult {
  double value = 0.0;
  // Cells where the reference has mass but the candidate has none; any such
  // cell makes the divergence infinite.
  std::size_t offending_cells = 0;
};

// Mean over x-columns of sum_y q1 * log(q1 / q2), with q the per-cell masses
// and 0 * log 0 := 0.  Requires both densities on the identical grid.
inline KlResult kl_grid(const GridDensity& truth, const GridDensity& model) {
  if (truth.x_grid != model.x_grid || truth.y_grid != model.y_grid) {
    throw ConfigError("kl_grid requires identical evaluation grids");
  }
  KlResult r;
  double acc = 0.0;
  const std::size_t ny = truth.ny();
  for (std::size_t ix = 0; ix < truth.nx(); ++ix) {
    double col = 0.0;
    for (std::size_t iy = 0; iy < ny; ++iy) {
      const double lp = truth.log_density(ix, iy);
      const double q1 = std::exp(lp) * truth.y_delta;
      if (!(q1 > 0.0)) continue;
      const double lq = model.log_density(ix, iy);
      if (std::isinf(lq) && lq < 0.0) {
        ++r.offending_cells;
        continue;
      }
      col += q1 * (lp - lq);
    }
    acc += col;
  }
  r.value = r.offending_cells > 0 ? std::numeric_limits<double>::infinity()
                                  : acc / static_cast<double>(truth.nx());
  return r;
}

// CSV export: one row per cell with its probability mass (17 significant
// digits, lossless on round trip).
inline void write_grid_csv(const GridDensity& gd, std::ostream& os) {
  os << "x_index,y_index,probability\n";
  char buf[96];
  for (std::size_t ix = 0; ix < gd.nx(); ++ix) {
    for (std::size_t iy = 0; iy < gd.ny(); ++iy) {
      std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g\n", ix, iy, gd.mass(ix, iy));
      os << buf;
    }
  }
}

// 8-bit binary PGM heatmap: columns are x (left to right), rows are y with the
// largest y on the top row; brightness is linear in probability with the image
// maximum mapped to white.
inline void write_grid_pgm(const GridDensity& gd, std::ostream& os) {
  os << "P5\n" << gd.nx() << " " << gd.ny() << "\n255\n";
  double pmax = 0.0;
  for (std::size_t ix = 0; ix < gd.nx(); ++ix) {
    for (std::size_t iy = 0; iy < gd.ny(); ++iy) pmax = std::max(pmax, gd.mass(ix, iy));
  }
  if (!(pmax > 0.0)) throw ConfigError("grid density has no positive mass to render");
  std::vector<unsigned char> row(gd.nx());
  for (std::size_t r = 0; r < gd.ny(); ++r) {
    const std::size_t iy = gd.ny() - 1 - r;
    for (std::size_t ix = 0; ix < gd.nx(); ++ix) {
      row[ix] = static_cast<unsigned char>(std::lround(255.0 * gd.mass(ix, iy) / pmax));
    }
    os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
}

}  // namespace ebmreg
