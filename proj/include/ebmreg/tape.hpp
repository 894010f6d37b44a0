#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ebmreg/jet.hpp"
#include "ebmreg/kernels.hpp"

namespace ebmreg {

using NodeId = std::uint32_t;
using GradVector = std::vector<double>;

inline constexpr NodeId kNoNode = std::numeric_limits<NodeId>::max();

struct TapeError : std::runtime_error {
  TapeError(const std::string& what, NodeId node) : std::runtime_error(what), node_id(node) {}
  NodeId node_id;
};

// Append-only record of a scalar-valued computation over a bound parameter
// vector theta. Values are computed eagerly as nodes are appended; backward()
// replays the record in reverse and returns d(root)/d(theta).
//
// A node's payload is either a row of reals or a row of second-order jets.
// A row holds the same scalar operation applied across a group of lanes
// (e.g. the M proposal samples of one training example); scalar expressions
// are rows of length one. Jet rows are stored as three consecutive planes
// (v, d1, d2) so plane arithmetic runs over contiguous memory and the v plane
// follows the exact same kernel path as a real row.
//
// theta must stay alive and unmodified from construction until the last
// backward() call on graphs built against it. A Tape is confined to one
// thread; backward() leaves the graph intact so it can be replayed.
class Tape {
 public:
  enum class Op : std::uint8_t {
    kConst,
    kParam,     // scalar leaf reading theta[aux0]
    kAdd,
    kSub,
    kMul,
    kAddImm,    // + imm (v lane)
    kMulImm,    // * imm (all lanes)
    kAddRow,    // + constant row from the const pool
    kLog,
    kExp,
    kRelu,
    kSoftplus,
    kAffine,    // W theta[aux0..], b theta[aux1..]: out = W*a + b
    kAffine2,   // W1 theta[aux0..] * a (group 1, broadcast) + W2 theta[aux1..] * b + bias theta[aux2..]
    kLinComb,   // sum_e w_e * elem_e + imm over flattened parent span (real)
    kLogSumExp, // log sum_e exp(elem_e + off_e), max-subtracted (real)
    kIndex,     // scalar = a[aux0]
    kJetVal,    // real row from jet payload plane
    kJetD1,
    kJetD2,
  };

  explicit Tape(std::span<const double> theta) : theta_(theta) {}

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t param_count() const { return theta_.size(); }
  std::span<const double> theta() const { return theta_; }

  void reset() {
    nodes_.clear();
    vals_.clear();
    span_pool_.clear();
    const_pool_.clear();
  }

  // ---- leaves ----

  NodeId constant(double v) { return constant_row({&v, 1}); }

  NodeId constant_row(std::span<const double> v) {
    NodeId id = new_node(Op::kConst, false, static_cast<std::uint32_t>(v.size()));
    double* p = val_ptr(id);
    for (std::size_t i = 0; i < v.size(); ++i) p[i] = v[i];
    return id;
  }

  NodeId constant_jet(Jet2 j) {
    NodeId id = new_node(Op::kConst, true, 1);
    double* p = val_ptr(id);
    p[0] = j.v;
    p[1] = j.d1;
    p[2] = j.d2;
    return id;
  }

  // row of jets sharing one derivative seed, e.g. sample positions seeded (., 1, 0)
  NodeId constant_jet_row(std::span<const double> v, double d1_fill, double d2_fill) {
    const auto n = static_cast<std::uint32_t>(v.size());
    NodeId id = new_node(Op::kConst, true, n);
    double* p = val_ptr(id);
    for (std::uint32_t i = 0; i < n; ++i) p[i] = v[i];
    for (std::uint32_t i = 0; i < n; ++i) p[n + i] = d1_fill;
    for (std::uint32_t i = 0; i < n; ++i) p[2 * n + i] = d2_fill;
    return id;
  }

  NodeId param(std::uint32_t idx) {
    if (idx >= theta_.size()) throw TapeError("param index out of range", next_id());
    NodeId id = new_node(Op::kParam, false, 1);
    node(id).aux0 = idx;
    val_ptr(id)[0] = theta_[idx];
    return id;
  }

  // ---- elementwise ----

  NodeId add(NodeId a, NodeId b) { return binary(Op::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(Op::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(Op::kMul, a, b); }

  NodeId add_imm(NodeId a, double c) { return unary_imm(Op::kAddImm, a, c); }
  NodeId mul_imm(NodeId a, double c) { return unary_imm(Op::kMulImm, a, c); }

  NodeId add_row(NodeId a, std::span<const double> c) {
    if (c.size() != length(a)) throw TapeError("add_row length mismatch", next_id());
    NodeId id = new_node(Op::kAddRow, is_jet(a), length(a));
    node(id).a = a;
    node(id).aux0 = push_consts(c);
    eval_node(id);
    return id;
  }

  NodeId log(NodeId a) { return unary(Op::kLog, a); }
  NodeId exp(NodeId a) { return unary(Op::kExp, a); }
  NodeId relu(NodeId a) { return unary(Op::kRelu, a); }
  NodeId softplus(NodeId a) { return unary(Op::kSoftplus, a); }

  // ---- parameterized affine layers ----

  NodeId affine(NodeId in, std::uint32_t w_ofs, std::uint32_t b_ofs, std::uint32_t out_dim,
                std::uint32_t in_dim) {
    const std::uint32_t group = row_group(in, in_dim);
    check_theta_slice(w_ofs, out_dim * in_dim);
    check_theta_slice(b_ofs, out_dim);
    NodeId id = new_node(Op::kAffine, is_jet(in), out_dim * group);
    Node& n = node(id);
    n.a = in;
    n.aux0 = w_ofs;
    n.aux1 = b_ofs;
    n.aux2 = in_dim;
    eval_node(id);
    return id;
  }

  // two-input affine; `a` is a real single-group row broadcast across b's group
  NodeId affine2(NodeId a, NodeId b, std::uint32_t w1_ofs, std::uint32_t w2_ofs,
                 std::uint32_t b_ofs, std::uint32_t out_dim, std::uint32_t in1_dim,
                 std::uint32_t in2_dim) {
    if (is_jet(a) || length(a) != in1_dim)
      throw TapeError("affine2 first input must be a real single-group row", next_id());
    const std::uint32_t group = row_group(b, in2_dim);
    check_theta_slice(w1_ofs, out_dim * in1_dim);
    check_theta_slice(w2_ofs, out_dim * in2_dim);
    check_theta_slice(b_ofs, out_dim);
    NodeId id = new_node(Op::kAffine2, is_jet(b), out_dim * group);
    Node& n = node(id);
    n.a = a;
    n.b = b;
    n.aux0 = w1_ofs;
    n.aux1 = w2_ofs;
    n.aux2 = b_ofs;
    n.aux3 = in2_dim;
    eval_node(id);
    return id;
  }

  // ---- reductions over flattened parent spans (real payloads only) ----

  NodeId lincomb(std::span<const NodeId> parents, std::span<const double> weights,
                 double imm = 0.0) {
    const std::uint32_t total = flat_size(parents);
    if (weights.size() != total) throw TapeError("lincomb weight count mismatch", next_id());
    NodeId id = new_node(Op::kLinComb, false, 1);
    Node& n = node(id);
    n.span_ofs = push_span(parents);
    n.span_len = static_cast<std::uint32_t>(parents.size());
    n.aux0 = push_consts(weights);
    n.imm = imm;
    eval_node(id);
    return id;
  }

  NodeId logsumexp(std::span<const NodeId> parents, std::span<const double> offsets = {}) {
    const std::uint32_t total = flat_size(parents);
    if (total == 0) throw TapeError("logsumexp over empty span", next_id());
    if (!offsets.empty() && offsets.size() != total)
      throw TapeError("logsumexp offset count mismatch", next_id());
    NodeId id = new_node(Op::kLogSumExp, false, 1);
    Node& n = node(id);
    n.span_ofs = push_span(parents);
    n.span_len = static_cast<std::uint32_t>(parents.size());
    n.aux0 = offsets.empty() ? kNoSlot : push_consts(offsets);
    eval_node(id);
    return id;
  }

  NodeId index(NodeId a, std::uint32_t i) {
    if (is_jet(a)) throw TapeError("index requires a real payload", next_id());
    if (i >= length(a)) throw TapeError("index out of range", next_id());
    NodeId id = new_node(Op::kIndex, false, 1);
    node(id).a = a;
    node(id).aux0 = i;
    eval_node(id);
    return id;
  }

  NodeId jet_value(NodeId a) { return jet_extract(Op::kJetVal, a); }
  NodeId jet_d1(NodeId a) { return jet_extract(Op::kJetD1, a); }
  NodeId jet_d2(NodeId a) { return jet_extract(Op::kJetD2, a); }

  // ---- reads ----

  bool is_jet(NodeId id) const { return nodes_[id].jet; }
  std::uint32_t length(NodeId id) const { return nodes_[id].len; }

  double value(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.jet || n.len != 1) throw TapeError("value() requires a real scalar node", id);
    return vals_[n.val];
  }

  Jet2 jet(NodeId id) const {
    const Node& n = nodes_[id];
    if (!n.jet || n.len != 1) throw TapeError("jet() requires a scalar jet node", id);
    return {vals_[n.val], vals_[n.val + 1], vals_[n.val + 2]};
  }

  // real row, or the v plane of a jet row
  std::span<const double> values(NodeId id) const {
    const Node& n = nodes_[id];
    return {vals_.data() + n.val, n.len};
  }

  Jet2 jet_at(NodeId id, std::uint32_t i) const {
    const Node& n = nodes_[id];
    if (!n.jet) throw TapeError("jet_at() requires a jet node", id);
    return {vals_[n.val + i], vals_[n.val + n.len + i], vals_[n.val + 2 * n.len + i]};
  }

  // ---- reverse sweep ----

  // d(root)/d(theta) for a real scalar root. The graph and theta are left
  // untouched; replaying over the same graph is bitwise reproducible.
  GradVector backward(NodeId root) const {
    const Node& r = nodes_[root];
    if (r.jet || r.len != 1) throw TapeError("backward root must be a real scalar", root);
    adj_.assign(vals_.size(), 0.0);
    GradVector grad(theta_.size(), 0.0);
    adj_[r.val] = 1.0;
    for (std::uint32_t i = static_cast<std::uint32_t>(nodes_.size()); i-- > 0;) {
      const Node& n = nodes_[i];
      const double* abar = adj_.data() + n.val;
      const std::uint32_t pl = payload_len(n);
      // branch-free flags so the pass vectorizes; the throw happens after it
      unsigned nan_seen = 0, live = 0;
      for (std::uint32_t e = 0; e < pl; ++e) {
        nan_seen |= static_cast<unsigned>(abar[e] != abar[e]);
        live |= static_cast<unsigned>(abar[e] != 0.0);
      }
      if (nan_seen) throw TapeError("NaN adjoint in backward", i);
      if (!live) continue;
      backward_node(i, grad);
    }
    return grad;
  }

 private:
  static constexpr std::uint32_t kNoSlot = std::numeric_limits<std::uint32_t>::max();

  struct Node {
    Op op;
    bool jet;
    std::uint32_t len;
    NodeId a = kNoNode;
    NodeId b = kNoNode;
    std::uint32_t val = 0;
    std::uint32_t span_ofs = 0;
    std::uint32_t span_len = 0;
    std::uint32_t aux0 = kNoSlot;
    std::uint32_t aux1 = kNoSlot;
    std::uint32_t aux2 = kNoSlot;
    std::uint32_t aux3 = kNoSlot;
    double imm = 0.0;
  };

  std::span<const double> theta_;
  std::vector<Node> nodes_;
  std::vector<double> vals_;
  std::vector<NodeId> span_pool_;
  std::vector<double> const_pool_;
  mutable std::vector<double> adj_;

  static std::uint32_t payload_len(const Node& n) { return n.jet ? 3 * n.len : n.len; }

  NodeId next_id() const { return static_cast<NodeId>(nodes_.size()); }

  Node& node(NodeId id) { return nodes_[id]; }

  double* val_ptr(NodeId id) { return vals_.data() + nodes_[id].val; }
  const double* val_ptr(NodeId id) const { return vals_.data() + nodes_[id].val; }

  NodeId new_node(Op op, bool jet, std::uint32_t len) {
    Node n;
    n.op = op;
    n.jet = jet;
    n.len = len;
    n.val = static_cast<std::uint32_t>(vals_.size());
    vals_.resize(vals_.size() + (jet ? 3 * len : len));
    nodes_.push_back(n);
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::uint32_t push_span(std::span<const NodeId> parents) {
    const auto ofs = static_cast<std::uint32_t>(span_pool_.size());
    span_pool_.insert(span_pool_.end(), parents.begin(), parents.end());
    return ofs;
  }

  std::uint32_t push_consts(std::span<const double> c) {
    const auto ofs = static_cast<std::uint32_t>(const_pool_.size());
    const_pool_.insert(const_pool_.end(), c.begin(), c.end());
    return ofs;
  }

  void check_theta_slice(std::uint32_t ofs, std::uint32_t len) const {
    if (ofs + len > theta_.size()) throw TapeError("theta slice out of range", next_id());
  }

  std::uint32_t row_group(NodeId in, std::uint32_t in_dim) const {
    const std::uint32_t len = length(in);
    if (in_dim == 0 || len % in_dim != 0) throw TapeError("affine input dim mismatch", next_id());
    return len / in_dim;
  }

  std::uint32_t flat_size(std::span<const NodeId> parents) const {
    std::uint32_t total = 0;
    for (NodeId p : parents) {
      if (is_jet(p)) throw TapeError("reduction requires real payloads", next_id());
      total += length(p);
    }
    return total;
  }

  NodeId binary(Op op, NodeId a, NodeId b) {
    if (length(a) != length(b)) throw TapeError("elementwise length mismatch", next_id());
    NodeId id = new_node(op, is_jet(a) || is_jet(b), length(a));
    node(id).a = a;
    node(id).b = b;
    eval_node(id);
    return id;
  }

  NodeId unary(Op op, NodeId a) {
    NodeId id = new_node(op, is_jet(a), length(a));
    node(id).a = a;
    eval_node(id);
    return id;
  }

  NodeId unary_imm(Op op, NodeId a, double c) {
    NodeId id = new_node(op, is_jet(a), length(a));
    node(id).a = a;
    node(id).imm = c;
    eval_node(id);
    return id;
  }

  NodeId jet_extract(Op op, NodeId a) {
    if (!is_jet(a)) throw TapeError("jet extraction requires a jet payload", next_id());
    NodeId id = new_node(op, false, length(a));
    node(id).a = a;
    eval_node(id);
    return id;
  }

  // fetches a parent payload as jet planes; real payloads alias their row as
  // the v plane with null derivative planes
  struct Planes {
    const double* v;
    const double* d1;
    const double* d2;
  };
  Planes planes(NodeId id) const {
    const Node& n = nodes_[id];
    const double* base = vals_.data() + n.val;
    if (n.jet) return {base, base + n.len, base + 2 * n.len};
    return {base, nullptr, nullptr};
  }
  struct MutPlanes {
    double* v;
    double* d1;
    double* d2;
  };
  MutPlanes mut_planes(std::vector<double>& buf, NodeId id) const {
    const Node& n = nodes_[id];
    double* base = buf.data() + n.val;
    if (n.jet) return {base, base + n.len, base + 2 * n.len};
    return {base, nullptr, nullptr};
  }

  void eval_node(NodeId id) {
    Node& n = nodes_[id];
    double* out = vals_.data() + n.val;
    const std::uint32_t len = n.len;
    switch (n.op) {
      case Op::kConst:
      case Op::kParam:
        return;
      case Op::kAdd:
      case Op::kSub: {
        const double sgn = n.op == Op::kSub ? -1.0 : 1.0;
        const Planes a = planes(n.a), b = planes(n.b);
        double* ov = out;
        for (std::uint32_t e = 0; e < len; ++e) ov[e] = a.v[e] + sgn * b.v[e];
        if (n.jet) {
          double* o1 = out + len;
          double* o2 = out + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e)
            o1[e] = (a.d1 ? a.d1[e] : 0.0) + sgn * (b.d1 ? b.d1[e] : 0.0);
          for (std::uint32_t e = 0; e < len; ++e)
            o2[e] = (a.d2 ? a.d2[e] : 0.0) + sgn * (b.d2 ? b.d2[e] : 0.0);
        }
        return;
      }
      case Op::kMul: {
        const Planes a = planes(n.a), b = planes(n.b);
        for (std::uint32_t e = 0; e < len; ++e) out[e] = a.v[e] * b.v[e];
        if (n.jet) {
          double* o1 = out + len;
          double* o2 = out + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) {
            const double a1 = a.d1 ? a.d1[e] : 0.0, b1 = b.d1 ? b.d1[e] : 0.0;
            const double a2 = a.d2 ? a.d2[e] : 0.0, b2 = b.d2 ? b.d2[e] : 0.0;
            o1[e] = a.v[e] * b1 + a1 * b.v[e];
            o2[e] = a.v[e] * b2 + 2.0 * a1 * b1 + a2 * b.v[e];
          }
        }
        return;
      }
      case Op::kAddImm: {
        const double* av = val_ptr(n.a);
        const std::uint32_t pl = payload_len(n);
        for (std::uint32_t e = 0; e < pl; ++e) out[e] = av[e];
        for (std::uint32_t e = 0; e < len; ++e) out[e] += n.imm;
        return;
      }
      case Op::kMulImm: {
        const double* av = val_ptr(n.a);
        const std::uint32_t pl = payload_len(n);
        for (std::uint32_t e = 0; e < pl; ++e) out[e] = av[e] * n.imm;
        return;
      }
      case Op::kAddRow: {
        const double* av = val_ptr(n.a);
        const double* c = const_pool_.data() + n.aux0;
        const std::uint32_t pl = payload_len(n);
        for (std::uint32_t e = 0; e < pl; ++e) out[e] = av[e];
        for (std::uint32_t e = 0; e < len; ++e) out[e] += c[e];
        return;
      }
      case Op::kLog: {
        const Planes a = planes(n.a);
        for (std::uint32_t e = 0; e < len; ++e) out[e] = std::log(a.v[e]);
        if (n.jet) {
          double* o1 = out + len;
          double* o2 = out + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) {
            const double g1 = 1.0 / a.v[e];
            o1[e] = g1 * a.d1[e];
            o2[e] = g1 * a.d2[e] - g1 * g1 * a.d1[e] * a.d1[e];
          }
        }
        return;
      }
      case Op::kExp: {
        const Planes a = planes(n.a);
        for (std::uint32_t e = 0; e < len; ++e) out[e] = std::exp(a.v[e]);
        if (n.jet) {
          double* o1 = out + len;
          double* o2 = out + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) {
            o1[e] = out[e] * a.d1[e];
            o2[e] = out[e] * (a.d2[e] + a.d1[e] * a.d1[e]);
          }
        }
        return;
      }
      case Op::kRelu: {
        const Planes a = planes(n.a);
        kernels::relu_rows(a.v, out, a.d1, n.jet ? out + len : nullptr, a.d2,
                           n.jet ? out + 2 * len : nullptr, len);
        return;
      }
      case Op::kSoftplus: {
        const Planes a = planes(n.a);
        kernels::softplus_rows(a.v, out, a.d1, n.jet ? out + len : nullptr, a.d2,
                               n.jet ? out + 2 * len : nullptr, len);
        return;
      }
      case Op::kAffine: {
        const Node& in = nodes_[n.a];
        const std::uint32_t in_dim = n.aux2;
        const std::uint32_t group = in.len / in_dim;
        const std::uint32_t out_dim = len / group;
        const double* W = theta_.data() + n.aux0;
        const double* B = theta_.data() + n.aux1;
        const Planes a = planes(n.a);
        kernels::affine_forward(W, B, a.v, out, out_dim, in_dim, group);
        if (n.jet) {
          kernels::affine_forward(W, nullptr, a.d1, out + len, out_dim, in_dim, group);
          kernels::affine_forward(W, nullptr, a.d2, out + 2 * len, out_dim, in_dim, group);
        }
        return;
      }
      case Op::kAffine2: {
        const Node& in2 = nodes_[n.b];
        const std::uint32_t in1_dim = nodes_[n.a].len;
        const std::uint32_t in2_dim = n.aux3;
        const std::uint32_t group = in2.len / in2_dim;
        const std::uint32_t out_dim = len / group;
        const double* W1 = theta_.data() + n.aux0;
        const double* W2 = theta_.data() + n.aux1;
        const double* B = theta_.data() + n.aux2;
        const double* x = val_ptr(n.a);
        const Planes b = planes(n.b);
        // bias + broadcast first-input contribution, then the grouped input
        for (std::uint32_t j = 0; j < out_dim; ++j) {
          double base = B[j];
          base += kernels::dot(W1 + j * in1_dim, x, in1_dim);
          double* o = out + j * group;
          for (std::uint32_t m = 0; m < group; ++m) o[m] = base;
        }
        kernels::affine_forward_acc(W2, b.v, out, out_dim, in2_dim, group);
        if (n.jet) {
          kernels::affine_forward(W2, nullptr, b.d1, out + len, out_dim, in2_dim, group);
          kernels::affine_forward(W2, nullptr, b.d2, out + 2 * len, out_dim, in2_dim, group);
        }
        return;
      }
      case Op::kLinComb: {
        const double* w = const_pool_.data() + n.aux0;
        double acc = n.imm;
        std::uint32_t e = 0;
        for (std::uint32_t s = 0; s < n.span_len; ++s) {
          const Node& p = nodes_[span_pool_[n.span_ofs + s]];
          acc += kernels::dot(w + e, vals_.data() + p.val, p.len);
          e += p.len;
        }
        out[0] = acc;
        return;
      }
      case Op::kLogSumExp: {
        const double* off = n.aux0 == kNoSlot ? nullptr : const_pool_.data() + n.aux0;
        double mx = -std::numeric_limits<double>::infinity();
        std::uint32_t e = 0;
        for (std::uint32_t s = 0; s < n.span_len; ++s) {
          const Node& p = nodes_[span_pool_[n.span_ofs + s]];
          const double* pv = vals_.data() + p.val;
          for (std::uint32_t k = 0; k < p.len; ++k, ++e) {
            const double t = pv[k] + (off ? off[e] : 0.0);
            if (t > mx) mx = t;
          }
        }
        double acc = 0.0;
        e = 0;
        for (std::uint32_t s = 0; s < n.span_len; ++s) {
          const Node& p = nodes_[span_pool_[n.span_ofs + s]];
          const double* pv = vals_.data() + p.val;
          for (std::uint32_t k = 0; k < p.len; ++k, ++e)
            acc += std::exp(pv[k] + (off ? off[e] : 0.0) - mx);
        }
        out[0] = mx + std::log(acc);
        return;
      }
      case Op::kIndex:
        out[0] = val_ptr(n.a)[n.aux0];
        return;
      case Op::kJetVal:
        for (std::uint32_t e = 0; e < len; ++e) out[e] = val_ptr(n.a)[e];
        return;
      case Op::kJetD1:
        for (std::uint32_t e = 0; e < len; ++e) out[e] = val_ptr(n.a)[len + e];
        return;
      case Op::kJetD2:
        for (std::uint32_t e = 0; e < len; ++e) out[e] = val_ptr(n.a)[2 * len + e];
        return;
    }
  }

  void backward_node(NodeId id, GradVector& grad) const {
    const Node& n = nodes_[id];
    const std::uint32_t len = n.len;
    const double* hv = vals_.data() + n.val;  // this node's forward payload
    const double* bar = adj_.data() + n.val;  // this node's adjoint payload
    switch (n.op) {
      case Op::kConst:
        return;
      case Op::kParam:
        grad[n.aux0] += bar[0];
        return;
      case Op::kAdd:
      case Op::kSub: {
        const double sgn = n.op == Op::kSub ? -1.0 : 1.0;
        accumulate_linear(n.a, bar, len, 1.0);
        accumulate_linear(n.b, bar, len, sgn);
        return;
      }
      case Op::kMul: {
        mul_backward(n, bar);
        return;
      }
      case Op::kAddImm:
      case Op::kAddRow:
      case Op::kMulImm: {
        const double scale = n.op == Op::kMulImm ? n.imm : 1.0;
        MutPlanes pa = mut_planes(adj_, n.a);
        const double* b1 = n.jet ? bar + len : nullptr;
        const double* b2 = n.jet ? bar + 2 * len : nullptr;
        for (std::uint32_t e = 0; e < len; ++e) pa.v[e] += scale * bar[e];
        if (pa.d1 && b1)
          for (std::uint32_t e = 0; e < len; ++e) pa.d1[e] += scale * b1[e];
        if (pa.d2 && b2)
          for (std::uint32_t e = 0; e < len; ++e) pa.d2[e] += scale * b2[e];
        return;
      }
      case Op::kLog: {
        const Planes a = planes(n.a);
        MutPlanes pa = mut_planes(adj_, n.a);
        if (!n.jet) {
          for (std::uint32_t e = 0; e < len; ++e) pa.v[e] += bar[e] / a.v[e];
        } else {
          const double* b1 = bar + len;
          const double* b2 = bar + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) {
            const double g1 = 1.0 / a.v[e];
            const double u1 = a.d1[e], u2 = a.d2[e];
            pa.v[e] += bar[e] * g1 - b1[e] * u1 * g1 * g1 +
                       b2[e] * (2.0 * u1 * u1 * g1 * g1 * g1 - u2 * g1 * g1);
            pa.d1[e] += b1[e] * g1 - b2[e] * 2.0 * u1 * g1 * g1;
            pa.d2[e] += b2[e] * g1;
          }
        }
        return;
      }
      case Op::kExp: {
        const Planes a = planes(n.a);
        MutPlanes pa = mut_planes(adj_, n.a);
        if (!n.jet) {
          for (std::uint32_t e = 0; e < len; ++e) pa.v[e] += bar[e] * hv[e];
        } else {
          const double* b1 = bar + len;
          const double* b2 = bar + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) {
            const double ev = hv[e];
            const double u1 = a.d1[e], u2 = a.d2[e];
            pa.v[e] += ev * (bar[e] + b1[e] * u1 + b2[e] * (u2 + u1 * u1));
            pa.d1[e] += ev * (b1[e] + b2[e] * 2.0 * u1);
            pa.d2[e] += ev * b2[e];
          }
        }
        return;
      }
      case Op::kRelu: {
        const Planes a = planes(n.a);
        MutPlanes pa = mut_planes(adj_, n.a);
        // branch-free gating (select, not branch) so the loops vectorize
        for (std::uint32_t e = 0; e < len; ++e) pa.v[e] += a.v[e] > 0.0 ? bar[e] : 0.0;
        if (n.jet) {
          const double* b1 = bar + len;
          const double* b2 = bar + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) pa.d1[e] += a.v[e] > 0.0 ? b1[e] : 0.0;
          for (std::uint32_t e = 0; e < len; ++e) pa.d2[e] += a.v[e] > 0.0 ? b2[e] : 0.0;
        }
        return;
      }
      case Op::kSoftplus: {
        const Planes a = planes(n.a);
        MutPlanes pa = mut_planes(adj_, n.a);
        if (!n.jet) {
          for (std::uint32_t e = 0; e < len; ++e) pa.v[e] += bar[e] * sigmoid(a.v[e]);
        } else {
          const double* b1 = bar + len;
          const double* b2 = bar + 2 * len;
          for (std::uint32_t e = 0; e < len; ++e) {
            const double s = sigmoid(a.v[e]);
            const double s1 = s * (1.0 - s);
            const double s2 = s1 * (1.0 - 2.0 * s);
            const double u1 = a.d1[e], u2 = a.d2[e];
            pa.v[e] += bar[e] * s + b1[e] * s1 * u1 + b2[e] * (s1 * u2 + s2 * u1 * u1);
            pa.d1[e] += b1[e] * s + b2[e] * 2.0 * s1 * u1;
            pa.d2[e] += b2[e] * s;
          }
        }
        return;
      }
      case Op::kAffine: {
        const Node& in = nodes_[n.a];
        const std::uint32_t in_dim = n.aux2;
        const std::uint32_t group = in.len / in_dim;
        const std::uint32_t out_dim = len / group;
        const double* W = theta_.data() + n.aux0;
        const Planes a = planes(n.a);
        MutPlanes pa = mut_planes(adj_, n.a);
        double* gW = grad.data() + n.aux0;
        double* gB = grad.data() + n.aux1;
        kernels::affine_backward_params(bar, a.v, gW, gB, out_dim, in_dim, group);
        kernels::affine_backward_input(W, bar, pa.v, out_dim, in_dim, group);
        if (n.jet) {
          kernels::affine_backward_params(bar + len, a.d1, gW, nullptr, out_dim, in_dim, group);
          kernels::affine_backward_params(bar + 2 * len, a.d2, gW, nullptr, out_dim, in_dim,
                                          group);
          kernels::affine_backward_input(W, bar + len, pa.d1, out_dim, in_dim, group);
          kernels::affine_backward_input(W, bar + 2 * len, pa.d2, out_dim, in_dim, group);
        }
        return;
      }
      case Op::kAffine2: {
        const std::uint32_t in1_dim = nodes_[n.a].len;
        const std::uint32_t in2_dim = n.aux3;
        const std::uint32_t group = nodes_[n.b].len / in2_dim;
        const std::uint32_t out_dim = len / group;
        const double* W1 = theta_.data() + n.aux0;
        const double* W2 = theta_.data() + n.aux1;
        const double* x = val_ptr(n.a);
        const Planes b = planes(n.b);
        MutPlanes px = mut_planes(adj_, n.a);
        MutPlanes pb = mut_planes(adj_, n.b);
        double* gW1 = grad.data() + n.aux0;
        double* gW2 = grad.data() + n.aux1;
        double* gB = grad.data() + n.aux2;
        // broadcast input: fold the group out of the v-plane adjoint first
        for (std::uint32_t j = 0; j < out_dim; ++j) {
          const double aj = kernels::row_sum(bar + j * group, group);
          gB[j] += aj;
          const double* w1row = W1 + j * in1_dim;
          double* g1row = gW1 + j * in1_dim;
          for (std::uint32_t k = 0; k < in1_dim; ++k) {
            g1row[k] += aj * x[k];
            px.v[k] += w1row[k] * aj;
          }
        }
        kernels::affine_backward_params(bar, b.v, gW2, nullptr, out_dim, in2_dim, group);
        kernels::affine_backward_input(W2, bar, pb.v, out_dim, in2_dim, group);
        if (n.jet) {
          kernels::affine_backward_params(bar + len, b.d1, gW2, nullptr, out_dim, in2_dim, group);
          kernels::affine_backward_params(bar + 2 * len, b.d2, gW2, nullptr, out_dim, in2_dim,
                                          group);
          kernels::affine_backward_input(W2, bar + len, pb.d1, out_dim, in2_dim, group);
          kernels::affine_backward_input(W2, bar + 2 * len, pb.d2, out_dim, in2_dim, group);
        }
        return;
      }
      case Op::kLinComb: {
        const double* w = const_pool_.data() + n.aux0;
        const double a = bar[0];
        std::uint32_t e = 0;
        for (std::uint32_t s = 0; s < n.span_len; ++s) {
          const Node& p = nodes_[span_pool_[n.span_ofs + s]];
          double* padj = adj_.data() + p.val;
          for (std::uint32_t k = 0; k < p.len; ++k, ++e) padj[k] += a * w[e];
        }
        return;
      }
      case Op::kLogSumExp: {
        const double* off = n.aux0 == kNoSlot ? nullptr : const_pool_.data() + n.aux0;
        const double a = bar[0];
        const double out_v = hv[0];
        std::uint32_t e = 0;
        for (std::uint32_t s = 0; s < n.span_len; ++s) {
          const Node& p = nodes_[span_pool_[n.span_ofs + s]];
          const double* pv = vals_.data() + p.val;
          double* padj = adj_.data() + p.val;
          for (std::uint32_t k = 0; k < p.len; ++k, ++e)
            padj[k] += a * std::exp(pv[k] + (off ? off[e] : 0.0) - out_v);
        }
        return;
      }
      case Op::kIndex:
        adj_[nodes_[n.a].val + n.aux0] += bar[0];
        return;
      case Op::kJetVal:
        for (std::uint32_t e = 0; e < len; ++e) adj_[nodes_[n.a].val + e] += bar[e];
        return;
      case Op::kJetD1: {
        const std::uint32_t plen = nodes_[n.a].len;
        for (std::uint32_t e = 0; e < len; ++e) adj_[nodes_[n.a].val + plen + e] += bar[e];
        return;
      }
      case Op::kJetD2: {
        const std::uint32_t plen = nodes_[n.a].len;
        for (std::uint32_t e = 0; e < len; ++e) adj_[nodes_[n.a].val + 2 * plen + e] += bar[e];
        return;
      }
    }
  }

  // adds scale * this-node adjoint into a parent, matching payload kinds:
  // a real parent of a jet node receives only the v-plane adjoint
  void accumulate_linear(NodeId parent, const double* bar, std::uint32_t len,
                         double scale) const {
    const Node& p = nodes_[parent];
    MutPlanes pa = mut_planes(adj_, parent);
    for (std::uint32_t e = 0; e < len; ++e) pa.v[e] += scale * bar[e];
    if (p.jet) {
      const double* b1 = bar + len;
      const double* b2 = bar + 2 * len;
      for (std::uint32_t e = 0; e < len; ++e) pa.d1[e] += scale * b1[e];
      for (std::uint32_t e = 0; e < len; ++e) pa.d2[e] += scale * b2[e];
    }
  }

  void mul_backward(const Node& n, const double* bar) const {
    const Planes a = planes(n.a);
    const Planes b = planes(n.b);
    MutPlanes pa = mut_planes(adj_, n.a);
    MutPlanes pb = mut_planes(adj_, n.b);
    const std::uint32_t len = n.len;
    if (!n.jet) {
      for (std::uint32_t e = 0; e < len; ++e) {
        pa.v[e] += bar[e] * b.v[e];
        pb.v[e] += bar[e] * a.v[e];
      }
      return;
    }
    const double* b1bar = bar + len;
    const double* b2bar = bar + 2 * len;
    for (std::uint32_t e = 0; e < len; ++e) {
      const double av = a.v[e], a1 = a.d1 ? a.d1[e] : 0.0, a2 = a.d2 ? a.d2[e] : 0.0;
      const double bv = b.v[e], b1 = b.d1 ? b.d1[e] : 0.0, b2 = b.d2 ? b.d2[e] : 0.0;
      // d(out)/d(a.v) spans all three output lanes; lower lanes never feed higher ones
      pa.v[e] += b2bar[e] * b2 + b1bar[e] * b1 + bar[e] * bv;
      if (pa.d1) pa.d1[e] += b1bar[e] * bv + b2bar[e] * 2.0 * b1;
      if (pa.d2) pa.d2[e] += b2bar[e] * bv;
      pb.v[e] += b2bar[e] * a2 + b1bar[e] * a1 + bar[e] * av;
      if (pb.d1) pb.d1[e] += b1bar[e] * av + b2bar[e] * 2.0 * a1;
      if (pb.d2) pb.d2[e] += b2bar[e] * av;
    }
  }
};

}  // namespace ebmreg
