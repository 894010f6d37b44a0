#pragma once

#include <array>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebmreg/jet.hpp"
#include "ebmreg/kernels.hpp"
#include "ebmreg/rng.hpp"
#include "ebmreg/tape.hpp"

namespace ebmreg {

struct ModelError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Nonlinearity { kRelu, kSoftplus, kIdentity };

inline const char* to_string(Nonlinearity nl) {
  switch (nl) {
    case Nonlinearity::kRelu: return "relu";
    case Nonlinearity::kSoftplus: return "softplus";
    case Nonlinearity::kIdentity: return "identity";
  }
  return "?";
}

inline Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "relu") return Nonlinearity::kRelu;
  if (s == "softplus") return Nonlinearity::kSoftplus;
  if (s == "identity") return Nonlinearity::kIdentity;
  throw ModelError("unknown nonlinearity: " + s);
}

// Two input branches that meet in a joint stack:
//   x -> [x_dims affine chain] -> hx
//   y -> [y_dims affine chain] -> hy
//   (hx, hy) -> [joint_dims affine chain] -> scalar energy
// The nonlinearity follows every layer except the final joint one. dims lists
// include the input width, so {1, 10, 10} is two layers.
struct MlpSpec {
  std::vector<std::uint32_t> x_dims{1, 10, 10};
  std::vector<std::uint32_t> y_dims{1, 10};
  std::vector<std::uint32_t> joint_dims{20, 10, 10, 10, 1};
  Nonlinearity nonlinearity = Nonlinearity::kRelu;

  void validate() const {
    auto chain = [](const std::vector<std::uint32_t>& d, const char* name) {
      if (d.size() < 2) throw ModelError(std::string(name) + ": needs at least one layer");
      for (auto v : d)
        if (v == 0) throw ModelError(std::string(name) + ": zero width");
    };
    chain(x_dims, "x_dims");
    chain(y_dims, "y_dims");
    chain(joint_dims, "joint_dims");
    if (x_dims.front() != 1) throw ModelError("x_dims: input width must be 1");
    if (y_dims.front() != 1) throw ModelError("y_dims: input width must be 1");
    if (joint_dims.front() != x_dims.back() + y_dims.back())
      throw ModelError("joint_dims: input width must equal x and y feature widths combined");
    if (joint_dims.back() != 1) throw ModelError("joint_dims: output width must be 1");
  }

  std::size_t param_count() const {
    auto count = [](const std::vector<std::uint32_t>& d) {
      std::size_t c = 0;
      for (std::size_t i = 0; i + 1 < d.size(); ++i)
        c += std::size_t{d[i]} * d[i + 1] + d[i + 1];
      return c;
    };
    return count(x_dims) + count(y_dims) + count(joint_dims);
  }
};

// Scratch buffers reused across forward calls; one per thread.
struct Workspace {
  std::vector<double> a, b;

  double* ensure_a(std::size_t n) {
    if (a.size() < n) a.resize(n);
    return a.data();
  }
  double* ensure_b(std::size_t n) {
    if (b.size() < n) b.resize(n);
    return b.data();
  }
};

// Energy network f(x, y) over a flat parameter vector. Parameter layout, in
// order: x-branch layers (W row-major, then bias), y-branch layers, then the
// joint stack where the first joint layer is stored as the x-feature weight
// block (out x |hx|), the y-feature weight block (out x |hy|), then bias.
// Splitting the first joint matrix by branch lets the x contribution be
// computed once and broadcast across any number of y lanes.
class EbmModel {
 public:
  EbmModel() : EbmModel(MlpSpec{}) {}

  explicit EbmModel(MlpSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    build_layout();
    theta_.assign(spec_.param_count(), 0.0);
  }

  const MlpSpec& spec() const { return spec_; }
  std::size_t param_count() const { return theta_.size(); }
  std::span<double> theta() { return theta_; }
  std::span<const double> theta() const { return theta_; }

  // weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) drawn in layout order with
  // the layer's full input width as fan-in; biases stay zero
  void init(std::uint64_t seed) {
    Rng rng(seed);
    for (const Layer& l : x_layers_) init_layer(l.w, l.out * l.in, l.in, rng);
    for (const Layer& l : y_layers_) init_layer(l.w, l.out * l.in, l.in, rng);
    const std::uint32_t j1_fan_in = j1_.x_in + j1_.y_in;
    init_layer(j1_.wx, j1_.out * j1_.x_in, j1_fan_in, rng);
    init_layer(j1_.wy, j1_.out * j1_.y_in, j1_fan_in, rng);
    for (const Layer& l : joint_rest_) init_layer(l.w, l.out * l.in, l.in, rng);
  }

  // ---- plain / jet evaluation (no tape) ----

  // x-branch features; reusable across every y at the same x
  std::vector<double> x_features(double x) const {
    std::vector<double> h{x}, next;
    for (const Layer& l : x_layers_) {
      next.assign(l.out, 0.0);
      kernels::affine_forward(theta_.data() + l.w, theta_.data() + l.b, h.data(), next.data(),
                              l.out, l.in, 1);
      apply_nl(next.data(), nullptr, nullptr, l.out);
      h = next;
    }
    return h;
  }

  // evaluates f(x, .) across a row of y lanes; planes = 1 plain, 2 first
  // derivative, 3 adds the second derivative. y and out hold `planes`
  // contiguous blocks of n lanes each.
  template <int kPlanes>
  void energy_rows(std::span<const double> xfeat, const double* y, double* out, std::uint32_t n,
                   Workspace& ws) const {
    static_assert(kPlanes >= 1 && kPlanes <= 3);
    const std::size_t stride = std::size_t{max_width_} * n;
    double* ha = ws.ensure_a(stride * kPlanes);
    double* hb = ws.ensure_b(stride * kPlanes);

    // y branch
    const double* cur[3] = {y, y + n, y + 2 * n};
    std::uint32_t width = 1;
    std::size_t cur_stride = n;
    for (const Layer& l : y_layers_) {
      for (int p = 0; p < kPlanes; ++p)
        kernels::affine_forward(theta_.data() + l.w, p == 0 ? theta_.data() + l.b : nullptr,
                                cur[p], ha + p * stride, l.out, l.in, n);
      apply_nl(ha, kPlanes > 1 ? ha + stride : nullptr, kPlanes > 2 ? ha + 2 * stride : nullptr,
               l.out * n);
      cur[0] = ha;
      cur[1] = ha + stride;
      cur[2] = ha + 2 * stride;
      cur_stride = stride;
      width = l.out;
      std::swap(ha, hb);
    }
    (void)cur_stride;

    // first joint layer: broadcast x contribution + y-feature block; it may
    // also be the final layer, in which case it writes the output directly
    {
      const bool last = joint_rest_.empty();
      double* dst = last ? out : ha;
      const std::size_t dst_stride = last ? n : stride;
      const double* W1 = theta_.data() + j1_.wx;
      const double* W2 = theta_.data() + j1_.wy;
      const double* B = theta_.data() + j1_.b;
      for (std::uint32_t j = 0; j < j1_.out; ++j) {
        const double base = B[j] + kernels::dot(W1 + j * j1_.x_in, xfeat.data(), j1_.x_in);
        double* o = dst + std::size_t{j} * n;
        for (std::uint32_t m = 0; m < n; ++m) o[m] = base;
      }
      kernels::affine_forward_acc(W2, cur[0], dst, j1_.out, j1_.y_in, n);
      for (int p = 1; p < kPlanes; ++p)
        kernels::affine_forward(W2, nullptr, cur[p], dst + p * dst_stride, j1_.out, j1_.y_in, n);
      if (last) return;
      apply_nl(ha, kPlanes > 1 ? ha + stride : nullptr, kPlanes > 2 ? ha + 2 * stride : nullptr,
               j1_.out * n);
      cur[0] = ha;
      cur[1] = ha + stride;
      cur[2] = ha + 2 * stride;
      width = j1_.out;
      std::swap(ha, hb);
    }

    // remaining joint stack; no nonlinearity after the last layer
    for (std::size_t li = 0; li < joint_rest_.size(); ++li) {
      const Layer& l = joint_rest_[li];
      const bool last = li + 1 == joint_rest_.size();
      double* dst = last ? out : ha;
      const std::size_t dst_stride = last ? n : stride;
      for (int p = 0; p < kPlanes; ++p)
        kernels::affine_forward(theta_.data() + l.w, p == 0 ? theta_.data() + l.b : nullptr,
                                cur[p], dst + p * dst_stride, l.out, l.in, n);
      if (!last) {
        apply_nl(ha, kPlanes > 1 ? ha + stride : nullptr, kPlanes > 2 ? ha + 2 * stride : nullptr,
                 l.out * n);
        cur[0] = ha;
        cur[1] = ha + stride;
        cur[2] = ha + 2 * stride;
        std::swap(ha, hb);
      }
    }
    (void)width;
  }

  double forward(double x, double y) const {
    Workspace ws;
    const auto xf = x_features(x);
    double out;
    energy_rows<1>(xf, &y, &out, 1, ws);
    return out;
  }

  double forward_with_features(std::span<const double> xfeat, double y, Workspace& ws) const {
    double out;
    energy_rows<1>(xfeat, &y, &out, 1, ws);
    return out;
  }

  Jet2 forward_jet(double x, Jet2 y) const {
    Workspace ws;
    const auto xf = x_features(x);
    return forward_jet_with_features(xf, y, ws);
  }

  Jet2 forward_jet_with_features(std::span<const double> xfeat, Jet2 y, Workspace& ws) const {
    const double in[3] = {y.v, y.d1, y.d2};
    double out[3];
    energy_rows<3>(xfeat, in, out, 1, ws);
    return {out[0], out[1], out[2]};
  }

  Dual forward_dual_with_features(std::span<const double> xfeat, Dual y, Workspace& ws) const {
    const double in[2] = {y.v, y.d1};
    double out[2];
    energy_rows<2>(xfeat, in, out, 1, ws);
    return {out[0], out[1]};
  }

  // ---- taped evaluation (theta gradients) ----

  // The tape must be bound to this model's theta.
  NodeId record_x_features(Tape& t, double x) const {
    NodeId h = t.constant(x);
    for (const Layer& l : x_layers_) {
      h = t.affine(h, l.w, l.b, l.out, l.in);
      h = record_nl(t, h);
    }
    return h;
  }

  // y_row: real or jet row of y lanes -> energy row of the same kind
  NodeId record_energy_rows(Tape& t, NodeId xfeat, NodeId y_row) const {
    NodeId h = y_row;
    for (const Layer& l : y_layers_) {
      h = t.affine(h, l.w, l.b, l.out, l.in);
      h = record_nl(t, h);
    }
    h = t.affine2(xfeat, h, j1_.wx, j1_.wy, j1_.b, j1_.out, j1_.x_in, j1_.y_in);
    if (joint_rest_.empty()) return h;
    h = record_nl(t, h);
    for (std::size_t li = 0; li < joint_rest_.size(); ++li) {
      const Layer& l = joint_rest_[li];
      h = t.affine(h, l.w, l.b, l.out, l.in);
      if (li + 1 != joint_rest_.size()) h = record_nl(t, h);
    }
    return h;
  }

  NodeId record_forward(Tape& t, double x, double y) const {
    NodeId xf = record_x_features(t, x);
    NodeId yn = t.constant(y);
    return record_energy_rows(t, xf, yn);
  }

 private:
  struct Layer {
    std::uint32_t w, b, in, out;
  };
  struct JointFirst {
    std::uint32_t wx, wy, b, x_in, y_in, out;
  };

  MlpSpec spec_;
  std::vector<double> theta_;
  std::vector<Layer> x_layers_, y_layers_, joint_rest_;
  JointFirst j1_{};
  std::uint32_t max_width_ = 0;

  void build_layout() {
    std::uint32_t ofs = 0;
    auto add_chain = [&](const std::vector<std::uint32_t>& dims, std::vector<Layer>& out_layers) {
      for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        Layer l{ofs, 0, dims[i], dims[i + 1]};
        ofs += l.in * l.out;
        l.b = ofs;
        ofs += l.out;
        out_layers.push_back(l);
      }
    };
    add_chain(spec_.x_dims, x_layers_);
    add_chain(spec_.y_dims, y_layers_);
    j1_.x_in = spec_.x_dims.back();
    j1_.y_in = spec_.y_dims.back();
    j1_.out = spec_.joint_dims[1];
    j1_.wx = ofs;
    ofs += j1_.out * j1_.x_in;
    j1_.wy = ofs;
    ofs += j1_.out * j1_.y_in;
    j1_.b = ofs;
    ofs += j1_.out;
    for (std::size_t i = 1; i + 1 < spec_.joint_dims.size(); ++i) {
      Layer l{ofs, 0, spec_.joint_dims[i], spec_.joint_dims[i + 1]};
      ofs += l.in * l.out;
      l.b = ofs;
      ofs += l.out;
      joint_rest_.push_back(l);
    }
    assert(ofs == spec_.param_count());
    for (auto v : spec_.x_dims) max_width_ = std::max(max_width_, v);
    for (auto v : spec_.y_dims) max_width_ = std::max(max_width_, v);
    for (auto v : spec_.joint_dims) max_width_ = std::max(max_width_, v);
  }

  void init_layer(std::uint32_t w_ofs, std::uint32_t w_count, std::uint32_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::uint32_t i = 0; i < w_count; ++i) theta_[w_ofs + i] = rng.uniform(-bound, bound);
  }

  void apply_nl(double* v, double* d1, double* d2, std::uint32_t n) const {
    switch (spec_.nonlinearity) {
      case Nonlinearity::kIdentity: return;
      case Nonlinearity::kRelu: kernels::relu_rows(v, v, d1, d1, d2, d2, n); return;
      case Nonlinearity::kSoftplus: kernels::softplus_rows(v, v, d1, d1, d2, d2, n); return;
    }
  }

  NodeId record_nl(Tape& t, NodeId h) const {
    switch (spec_.nonlinearity) {
      case Nonlinearity::kIdentity: return h;
      case Nonlinearity::kRelu: return t.relu(h);
      case Nonlinearity::kSoftplus: return t.softplus(h);
    }
    return h;
  }
};

}  // namespace ebmreg
