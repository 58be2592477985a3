#pragma once

// Inner-instance query fusion, masked inner-instance self-attention and the
// decoder layer/stack built from them. Every forward function can fill a
// cache; the matching backward consumes it and accumulates parameter
// gradients into the store.

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "insight/error.hpp"
#include "insight/numcore.hpp"
#include "insight/queries.hpp"
#include "insight/rng.hpp"

namespace insight {

enum class FusionMode { none, mean, feed_forward, self_attention };
enum class MaskMode { off, no_mask_attn, masked };
enum class Placement { after_cross, before_cross };

inline std::string_view to_string(FusionMode m) {
  switch (m) {
    case FusionMode::none: return "none";
    case FusionMode::mean: return "mean";
    case FusionMode::feed_forward: return "feed_forward";
    case FusionMode::self_attention: return "self_attention";
  }
  return "?";
}
inline std::string_view to_string(MaskMode m) {
  switch (m) {
    case MaskMode::off: return "off";
    case MaskMode::no_mask_attn: return "no_mask_attn";
    case MaskMode::masked: return "masked";
  }
  return "?";
}
inline std::string_view to_string(Placement p) { return p == Placement::after_cross ? "after_cross" : "before_cross"; }

inline std::optional<FusionMode> fusion_mode_from_string(std::string_view s) {
  for (auto v : {FusionMode::none, FusionMode::mean, FusionMode::feed_forward, FusionMode::self_attention})
    if (to_string(v) == s) return v;
  return std::nullopt;
}
inline std::optional<MaskMode> mask_mode_from_string(std::string_view s) {
  for (auto v : {MaskMode::off, MaskMode::no_mask_attn, MaskMode::masked})
    if (to_string(v) == s) return v;
  return std::nullopt;
}
inline std::optional<Placement> placement_from_string(std::string_view s) {
  for (auto v : {Placement::after_cross, Placement::before_cross})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

// ------------------------------------------------------------------ masks

struct MaskConfig {
  double epsilon = 0.1;

  void validate() const {
    if (!(epsilon >= 0.0 && epsilon < 1.0)) throw Error("epsilon must lie in [0, 1), got " + std::to_string(epsilon));
  }
};

/// Blocks every inter-instance pair. In training mode each off-diagonal
/// intra-instance pair is additionally blocked with probability `epsilon`,
/// drawn independently in row-major order. The diagonal is always allowed.
inline AttentionMask build_instance_mask(std::span<const int> instance_of, double epsilon, Rng* rng, bool training) {
  MaskConfig{epsilon}.validate();
  const auto n = static_cast<Eigen::Index>(instance_of.size());
  AttentionMask m(n, n);
  const bool draw = training && epsilon > 0.0;
  if (draw && rng == nullptr) throw Error("build_instance_mask: training with epsilon > 0 needs a generator");
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = 0; b < n; ++b) {
      if (instance_of[a] != instance_of[b]) {
        m(a, b) = true;
      } else if (a == b || !draw) {
        m(a, b) = false;
      } else {
        m(a, b) = rng->bernoulli(epsilon);
      }
    }
  }
  return m;
}

// ------------------------------------------------------------------ building blocks

/// y = x W (+ b).
struct Linear {
  ParamId w;
  std::optional<ParamId> b;
};

inline Linear make_linear(ParamStore& s, const std::string& name, int in, int out, Rng& rng, bool bias = true) {
  const double a = std::sqrt(6.0 / static_cast<double>(in + out));
  Tensor2 w(in, out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-a, a);
  Linear l{s.add(name + ".w", std::move(w)), std::nullopt};
  if (bias) l.b = s.add(name + ".b", Tensor2::Zero(1, out));
  return l;
}

inline Tensor2 linear_forward(const ParamStore& s, const Linear& l, const Tensor2& x) {
  if (l.b) return affine(x, s.value(l.w), s.value(*l.b));
  const Tensor2& w = s.value(l.w);
  if (x.cols() != w.rows()) throw ShapeError("linear: x " + shape_str(x) + " vs W " + shape_str(w));
  return x * w;
}

/// Accumulates dW (and db) and returns dx.
inline Tensor2 linear_backward(ParamStore& s, const Linear& l, const Tensor2& x, const Tensor2& dy) {
  s.accumulate(l.w, x.transpose() * dy);
  if (l.b) s.accumulate(*l.b, dy.colwise().sum());
  return dy * s.value(l.w).transpose();
}

struct NormParams {
  ParamId gain;
  ParamId bias;
};

inline NormParams make_norm(ParamStore& s, const std::string& name, int d) {
  return {s.add(name + ".gain", Tensor2::Ones(1, d)), s.add(name + ".bias", Tensor2::Zero(1, d))};
}

// ------------------------------------------------------------------ multi-head attention

struct MhaParams {
  Linear q, k, v, o;
  int heads = 1;
};

inline MhaParams make_mha(ParamStore& s, const std::string& name, int d, int heads, Rng& rng) {
  if (heads < 1 || d % heads != 0) {
    throw Error("attention heads (" + std::to_string(heads) + ") must divide d (" + std::to_string(d) + ")");
  }
  MhaParams p;
  p.q = make_linear(s, name + ".q", d, d, rng);
  // A key bias only shifts each score row by a constant; softmax ignores it.
  p.k = make_linear(s, name + ".k", d, d, rng, false);
  p.v = make_linear(s, name + ".v", d, d, rng);
  p.o = make_linear(s, name + ".o", d, d, rng);
  p.heads = heads;
  return p;
}

struct MhaCache {
  Tensor2 xq, xk, xv;
  Tensor2 q, k, v;
  std::vector<Tensor2> weights;
  Tensor2 concat;
};

inline Tensor2 mha_forward(const ParamStore& s, const MhaParams& p, const Tensor2& xq, const Tensor2& xk,
                           const Tensor2& xv, const AttentionMask* mask, MhaCache& c) {
  c.xq = xq;
  c.xk = xk;
  c.xv = xv;
  c.q = linear_forward(s, p.q, xq);
  c.k = linear_forward(s, p.k, xk);
  c.v = linear_forward(s, p.v, xv);
  const Eigen::Index dh = c.q.cols() / p.heads;
  c.concat.resize(xq.rows(), c.q.cols());
  c.weights.resize(static_cast<std::size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    const Tensor2 qh = c.q.middleCols(h * dh, dh);
    const Tensor2 kh = c.k.middleCols(h * dh, dh);
    const Tensor2 vh = c.v.middleCols(h * dh, dh);
    auto o = attention(qh, kh, vh, mask);
    c.concat.middleCols(h * dh, dh) = o.out;
    c.weights[static_cast<std::size_t>(h)] = std::move(o.weights);
  }
  return linear_forward(s, p.o, c.concat);
}

struct MhaGrad {
  Tensor2 dxq, dxk, dxv;
};

inline MhaGrad mha_backward(ParamStore& s, const MhaParams& p, const MhaCache& c, const Tensor2& dout) {
  const Tensor2 dconcat = linear_backward(s, p.o, c.concat, dout);
  const Eigen::Index dh = c.q.cols() / p.heads;
  Tensor2 dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
  for (int h = 0; h < p.heads; ++h) {
    const Tensor2 qh = c.q.middleCols(h * dh, dh);
    const Tensor2 kh = c.k.middleCols(h * dh, dh);
    const Tensor2 vh = c.v.middleCols(h * dh, dh);
    const auto g = attention_backward(qh, kh, vh, c.weights[static_cast<std::size_t>(h)],
                                      dconcat.middleCols(h * dh, dh));
    dq.middleCols(h * dh, dh) = g.dq;
    dk.middleCols(h * dh, dh) = g.dk;
    dv.middleCols(h * dh, dh) = g.dv;
  }
  MhaGrad g;
  g.dxq = linear_backward(s, p.q, c.xq, dq);
  g.dxk = linear_backward(s, p.k, c.xk, dk);
  g.dxv = linear_backward(s, p.v, c.xv, dv);
  return g;
}

// ------------------------------------------------------------------ query fusion

struct FusionParams {
  FusionMode mode = FusionMode::none;
  int n_points = 1;
  Linear f1, f2;      // feed_forward: phi(x) = gelu(x W1 + b1) W2 + b2
  Linear wq, wk, wv;  // self_attention
};

inline FusionParams make_fusion(ParamStore& s, const std::string& name, FusionMode mode, int d, int n_points,
                                Rng& rng) {
  FusionParams p;
  p.mode = mode;
  p.n_points = n_points;
  if (mode == FusionMode::feed_forward) {
    p.f1 = make_linear(s, name + ".ff1", d, 2 * d, rng);
    p.f2 = make_linear(s, name + ".ff2", 2 * d, d, rng);
  } else if (mode == FusionMode::self_attention) {
    p.wq = make_linear(s, name + ".q", d, d, rng, false);
    p.wk = make_linear(s, name + ".k", d, d, rng, false);
    p.wv = make_linear(s, name + ".v", d, d, rng, false);
  }
  return p;
}

struct FusionCache {
  Tensor2 x;
  Tensor2 h1, a1, phi;                   // feed_forward
  Tensor2 q, k, v;                       // self_attention
  std::vector<Tensor2> block_weights;    // self_attention, one per instance
};

namespace detail {

inline void check_blocks(const Tensor2& x, int n_points) {
  if (n_points < 1 || x.rows() % n_points != 0) {
    throw ShapeError("fusion: " + shape_str(x) + " is not a whole number of " + std::to_string(n_points) +
                     "-point instances");
  }
}

/// Replaces each n_points-row block by copies of its mean.
inline Tensor2 block_mean(const Tensor2& x, int n_points) {
  Tensor2 y(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); i += n_points) {
    const Eigen::RowVectorXd mean = x.middleRows(i, n_points).colwise().sum() / static_cast<double>(n_points);
    for (int j = 0; j < n_points; ++j) y.row(i + j) = mean;
  }
  return y;
}

}  // namespace detail

inline Tensor2 fuse_forward(const ParamStore& s, const FusionParams& p, const Tensor2& x, FusionCache& c) {
  detail::check_blocks(x, p.n_points);
  c.x = x;
  switch (p.mode) {
    case FusionMode::none: return x;
    case FusionMode::mean: return detail::block_mean(x, p.n_points);
    case FusionMode::feed_forward: {
      c.h1 = linear_forward(s, p.f1, x);
      c.a1 = gelu(c.h1);
      c.phi = linear_forward(s, p.f2, c.a1);
      return x + detail::block_mean(c.phi, p.n_points);
    }
    case FusionMode::self_attention: {
      c.q = linear_forward(s, p.wq, x);
      c.k = linear_forward(s, p.wk, x);
      c.v = linear_forward(s, p.wv, x);
      Tensor2 y = x;
      c.block_weights.clear();
      for (Eigen::Index i = 0; i < x.rows(); i += p.n_points) {
        auto o = attention(c.q.middleRows(i, p.n_points), c.k.middleRows(i, p.n_points),
                           c.v.middleRows(i, p.n_points));
        y.middleRows(i, p.n_points) += o.out;
        c.block_weights.push_back(std::move(o.weights));
      }
      return y;
    }
  }
  return x;
}

inline Tensor2 fuse_backward(ParamStore& s, const FusionParams& p, const FusionCache& c, const Tensor2& dy) {
  switch (p.mode) {
    case FusionMode::none: return dy;
    case FusionMode::mean: return detail::block_mean(dy, p.n_points);
    case FusionMode::feed_forward: {
      const Tensor2 dphi = detail::block_mean(dy, p.n_points);
      const Tensor2 da1 = linear_backward(s, p.f2, c.a1, dphi);
      return dy + linear_backward(s, p.f1, c.x, gelu_backward(c.h1, da1));
    }
    case FusionMode::self_attention: {
      Tensor2 dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
      std::size_t blk = 0;
      for (Eigen::Index i = 0; i < c.x.rows(); i += p.n_points, ++blk) {
        const auto g = attention_backward(c.q.middleRows(i, p.n_points), c.k.middleRows(i, p.n_points),
                                          c.v.middleRows(i, p.n_points), c.block_weights[blk],
                                          dy.middleRows(i, p.n_points));
        dq.middleRows(i, p.n_points) = g.dq;
        dk.middleRows(i, p.n_points) = g.dk;
        dv.middleRows(i, p.n_points) = g.dv;
      }
      Tensor2 dx = dy;
      dx += linear_backward(s, p.wq, c.x, dq);
      dx += linear_backward(s, p.wk, c.x, dk);
      dx += linear_backward(s, p.wv, c.x, dv);
      return dx;
    }
  }
  return dy;
}

/// Fuses the queries of a query set; layout and provenance are unchanged.
inline QuerySet fuse_queries(const QuerySet& qs, const ParamStore& s, const FusionParams& p) {
  FusionCache c;
  QuerySet out = qs;
  out.queries = fuse_forward(s, p, qs.queries, c);
  return out;
}

// ------------------------------------------------------------------ decoder layer

enum class SubLayer { self_attn, cross_attn, inner_attn, feed_forward };

struct DecoderOptions {
  int dim = 64;
  int heads = 4;
  int layers = 3;
  MaskMode mask_mode = MaskMode::masked;
  Placement placement = Placement::after_cross;
  double epsilon = 0.1;
};

/// Sub-layer order for the given options. The inner-instance module follows
/// cross-attention by default and is omitted when the mask mode is `off`.
inline std::vector<SubLayer> sublayer_order(const DecoderOptions& o) {
  std::vector<SubLayer> order{SubLayer::self_attn};
  const bool inner = o.mask_mode != MaskMode::off;
  if (inner && o.placement == Placement::before_cross) order.push_back(SubLayer::inner_attn);
  order.push_back(SubLayer::cross_attn);
  if (inner && o.placement == Placement::after_cross) order.push_back(SubLayer::inner_attn);
  order.push_back(SubLayer::feed_forward);
  return order;
}

struct DecoderLayerParams {
  std::vector<SubLayer> order;
  MhaParams self_attn, cross_attn, inner_attn;
  Linear ff1, ff2;
  std::array<NormParams, 4> norms;  // indexed by SubLayer
};

inline DecoderLayerParams make_decoder_layer(ParamStore& s, const std::string& name, const DecoderOptions& o,
                                             Rng& rng) {
  DecoderLayerParams p;
  p.order = sublayer_order(o);
  for (auto sl : p.order) {
    const auto idx = static_cast<std::size_t>(sl);
    switch (sl) {
      case SubLayer::self_attn: p.self_attn = make_mha(s, name + ".self_attn", o.dim, o.heads, rng); break;
      case SubLayer::cross_attn: p.cross_attn = make_mha(s, name + ".cross_attn", o.dim, o.heads, rng); break;
      case SubLayer::inner_attn: p.inner_attn = make_mha(s, name + ".inner_attn", o.dim, o.heads, rng); break;
      case SubLayer::feed_forward:
        p.ff1 = make_linear(s, name + ".ffn1", o.dim, 2 * o.dim, rng);
        p.ff2 = make_linear(s, name + ".ffn2", 2 * o.dim, o.dim, rng);
        break;
    }
    static constexpr std::array<const char*, 4> kNormNames = {".norm_self", ".norm_cross", ".norm_inner", ".norm_ffn"};
    p.norms[idx] = make_norm(s, name + kNormNames[idx], o.dim);
  }
  return p;
}

struct SubLayerCache {
  SubLayer kind{};
  MhaCache mha;
  Tensor2 ff_in, ff_h, ff_a;
  LayerNormOutput norm;
};

struct DecoderLayerCache {
  std::vector<SubLayerCache> subs;
};

/// One decoder layer. `inner_mask` is the inner-instance mask for sub-layer 3
/// (nullptr attends everywhere). Each sub-layer computes LN(x + f(x)).
inline Tensor2 decoder_layer(const ParamStore& s, const DecoderLayerParams& p, const Tensor2& queries,
                             const Tensor2& bev_keys, const Tensor2& bev_values, const AttentionMask* inner_mask,
                             DecoderLayerCache& c) {
  Tensor2 x = queries;
  c.subs.assign(p.order.size(), {});
  for (std::size_t i = 0; i < p.order.size(); ++i) {
    auto& sc = c.subs[i];
    sc.kind = p.order[i];
    Tensor2 f;
    switch (sc.kind) {
      case SubLayer::self_attn: f = mha_forward(s, p.self_attn, x, x, x, nullptr, sc.mha); break;
      case SubLayer::cross_attn: f = mha_forward(s, p.cross_attn, x, bev_keys, bev_values, nullptr, sc.mha); break;
      case SubLayer::inner_attn: f = mha_forward(s, p.inner_attn, x, x, x, inner_mask, sc.mha); break;
      case SubLayer::feed_forward:
        sc.ff_in = x;
        sc.ff_h = linear_forward(s, p.ff1, x);
        sc.ff_a = gelu(sc.ff_h);
        f = linear_forward(s, p.ff2, sc.ff_a);
        break;
    }
    const auto& n = p.norms[static_cast<std::size_t>(sc.kind)];
    sc.norm = layer_norm(x + f, s.value(n.gain), s.value(n.bias));
    x = sc.norm.y;
  }
  return x;
}

struct DecoderLayerGrad {
  Tensor2 dqueries, dkeys, dvalues;
};

inline DecoderLayerGrad decoder_layer_backward(ParamStore& s, const DecoderLayerParams& p,
                                               const DecoderLayerCache& c, const Tensor2& dy) {
  DecoderLayerGrad g;
  Tensor2 dx = dy;
  for (std::size_t i = c.subs.size(); i-- > 0;) {
    const auto& sc = c.subs[i];
    const auto& n = p.norms[static_cast<std::size_t>(sc.kind)];
    const auto ln = layer_norm_backward(sc.norm, s.value(n.gain), dx);
    s.accumulate(n.gain, ln.dgain);
    s.accumulate(n.bias, ln.dbias);
    dx = ln.dx;  // residual path
    switch (sc.kind) {
      case SubLayer::self_attn: {
        const auto m = mha_backward(s, p.self_attn, sc.mha, ln.dx);
        dx += m.dxq + m.dxk + m.dxv;
        break;
      }
      case SubLayer::inner_attn: {
        const auto m = mha_backward(s, p.inner_attn, sc.mha, ln.dx);
        dx += m.dxq + m.dxk + m.dxv;
        break;
      }
      case SubLayer::cross_attn: {
        const auto m = mha_backward(s, p.cross_attn, sc.mha, ln.dx);
        dx += m.dxq;
        g.dkeys = m.dxk;
        g.dvalues = m.dxv;
        break;
      }
      case SubLayer::feed_forward: {
        const Tensor2 da = linear_backward(s, p.ff2, sc.ff_a, ln.dx);
        dx += linear_backward(s, p.ff1, sc.ff_in, gelu_backward(sc.ff_h, da));
        break;
      }
    }
  }
  g.dqueries = std::move(dx);
  return g;
}

// ------------------------------------------------------------------ decoder stack

struct DecoderStack {
  DecoderOptions options;
  std::vector<DecoderLayerParams> layers;
};

inline DecoderStack make_decoder_stack(ParamStore& s, const std::string& name, const DecoderOptions& o, Rng& rng) {
  if (o.layers < 1) throw Error("decoder needs at least one layer");
  MaskConfig{o.epsilon}.validate();
  DecoderStack st;
  st.options = o;
  for (int l = 0; l < o.layers; ++l) st.layers.push_back(make_decoder_layer(s, name + "." + std::to_string(l), o, rng));
  return st;
}

/// Per-layer masks for one forward pass: fresh epsilon draws per layer in
/// training mode, the deterministic block mask otherwise. Empty when the
/// inner module is absent or unmasked.
inline std::vector<AttentionMask> draw_layer_masks(const DecoderOptions& o, std::span<const int> instance_of,
                                                   Rng* rng, bool training) {
  std::vector<AttentionMask> masks;
  if (o.mask_mode != MaskMode::masked) return masks;
  for (int l = 0; l < o.layers; ++l) masks.push_back(build_instance_mask(instance_of, o.epsilon, rng, training));
  return masks;
}

struct DecoderStackCache {
  std::vector<DecoderLayerCache> layers;
};

/// Runs all layers and returns every layer's output (the last is the final
/// query state).
inline std::vector<Tensor2> decoder_stack(const ParamStore& s, const DecoderStack& st, const Tensor2& queries,
                                          const Tensor2& bev_keys, const Tensor2& bev_values,
                                          const std::vector<AttentionMask>& masks, DecoderStackCache& c) {
  if (!masks.empty() && masks.size() != st.layers.size()) {
    throw Error("decoder_stack: " + std::to_string(masks.size()) + " masks for " + std::to_string(st.layers.size()) +
                " layers");
  }
  std::vector<Tensor2> outs;
  c.layers.assign(st.layers.size(), {});
  Tensor2 x = queries;
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    const AttentionMask* m = masks.empty() ? nullptr : &masks[l];
    x = decoder_layer(s, st.layers[l], x, bev_keys, bev_values, m, c.layers[l]);
    outs.push_back(x);
  }
  return outs;
}

struct DecoderStackGrad {
  Tensor2 dqueries, dkeys, dvalues;
};

/// `douts[l]` is the loss gradient with respect to layer l's output.
inline DecoderStackGrad decoder_stack_backward(ParamStore& s, const DecoderStack& st, const DecoderStackCache& c,
                                               const std::vector<Tensor2>& douts) {
  DecoderStackGrad g;
  Tensor2 carry;
  for (std::size_t l = st.layers.size(); l-- > 0;) {
    Tensor2 dy = douts[l];
    if (carry.size() > 0) dy += carry;
    auto lg = decoder_layer_backward(s, st.layers[l], c.layers[l], dy);
    if (g.dkeys.size() == 0) {
      g.dkeys = std::move(lg.dkeys);
      g.dvalues = std::move(lg.dvalues);
    } else {
      g.dkeys += lg.dkeys;
      g.dvalues += lg.dvalues;
    }
    carry = std::move(lg.dqueries);
  }
  g.dqueries = std::move(carry);
  return g;
}

}  // namespace insight
