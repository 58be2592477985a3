#pragma once

// Finite-difference checks over every differentiable module at micro shapes.

#include <algorithm>
#include <chrono>
#include <functional>
#include <string>
#include <optional>
#include <vector>

#include <json.hpp>

#include "insight/decoder.hpp"
#include "insight/detector.hpp"
#include "insight/numcore/grad_check.hpp"
#include "insight/queries.hpp"
#include "insight/synthgen.hpp"

namespace insight {

struct GradSuiteOptions {
  double rel_tol = 1e-4;
  /// Trials per primitive op; composite modules run once per variant.
  int trials = 10;
  std::uint64_t seed = 0;
  /// Name of an op whose analytic gradient is scaled by 1.01 (negative control).
  std::string inject_bug;
};

struct GradSuiteEntry {
  std::string op;
  int trials = 0;
  std::size_t coords = 0;
  double max_rel_err = 0.0;
  std::string worst_param;
  double seconds = 0.0;
  bool pass = false;
};

struct GradSuiteReport {
  std::vector<GradSuiteEntry> entries;
  double seconds = 0.0;

  bool pass() const {
    for (const auto& e : entries) {
      if (!e.pass) return false;
    }
    return !entries.empty();
  }
  std::vector<std::string> failing() const {
    std::vector<std::string> out;
    for (const auto& e : entries) {
      if (!e.pass) out.push_back(e.op);
    }
    return out;
  }
};

namespace detail {

inline Tensor2 uniform_tensor(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  Tensor2 t(r, c);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-scale, scale);
  return t;
}

inline double inner(const Tensor2& a, const Tensor2& b) { return (a.array() * b.array()).sum(); }

/// One trial: builds a store and a loss over it.
struct GradCase {
  ParamStore store;
  LossFn loss;
};

using CaseFactory = std::function<void(Rng&, GradCase&)>;

struct SuiteOp {
  std::string name;
  int trials;
  CaseFactory make;
};

/// <op(inputs), R> for a fixed random R, with `bwd` accumulating the gradient.
template <class Fwd, class Bwd>
LossFn probe(Tensor2 r, Fwd fwd, Bwd bwd) {
  return [r = std::move(r), fwd, bwd](ParamStore& s, bool with_grad) {
    const Tensor2 out = fwd(s);
    if (with_grad) bwd(s, r);
    return inner(out, r);
  };
}

inline std::vector<Instance> micro_scene() {
  Instance line{{{-2.0, -2.5}, {-1.0, 0.0}, {-2.2, 2.4}}, InstanceKind::polyline, ElementClass::divider};
  Instance box{{{0.5, -1.0}, {2.0, -1.0}, {2.0, 1.5}, {0.5, 1.5}, {0.5, -1.0}}, InstanceKind::polygon,
               ElementClass::pedestrian_crossing};
  return {canonicalize(line), canonicalize(box)};
}

inline const RasterRange kMicroRange{-3.0, 3.0, -3.0, 3.0};
inline constexpr double kMicroResolution = 0.3;

inline DetectorConfig micro_detector_config(QueryScheme scheme) {
  DetectorConfig c;
  c.n_instances = 2;
  c.n_points = 3;
  c.dim = 8;
  c.layers = 1;
  c.heads = 2;
  c.patch = 5;
  c.epsilon = 0.3;
  c.query_scheme = scheme;
  return c;
}

inline std::vector<SuiteOp> primitive_ops() {
  std::vector<SuiteOp> ops;
  ops.push_back({"affine", 0, [](Rng& rng, GradCase& gc) {
                   const int n = rng.uniform_int(1, 8), di = rng.uniform_int(1, 8), dout = rng.uniform_int(1, 8);
                   const auto x = gc.store.add("x", uniform_tensor(rng, n, di));
                   const auto w = gc.store.add("w", uniform_tensor(rng, di, dout));
                   const auto b = gc.store.add("b", uniform_tensor(rng, 1, dout));
                   gc.loss = probe(
                       uniform_tensor(rng, n, dout), [=](ParamStore& s) { return affine(s.value(x), s.value(w), s.value(b)); },
                       [=](ParamStore& s, const Tensor2& dy) {
                         const auto g = affine_backward(s.value(x), s.value(w), dy);
                         s.accumulate(x, g.dx);
                         s.accumulate(w, g.dw);
                         s.accumulate(b, g.db);
                       });
                 }});
  ops.push_back({"softmax", 0, [](Rng& rng, GradCase& gc) {
                   const int n = rng.uniform_int(1, 8), m = rng.uniform_int(1, 8);
                   const auto x = gc.store.add("x", uniform_tensor(rng, n, m, 3.0));
                   gc.loss = probe(
                       uniform_tensor(rng, n, m), [=](ParamStore& s) { return softmax_rows(s.value(x)); },
                       [=](ParamStore& s, const Tensor2& dy) {
                         s.accumulate(x, softmax_rows_backward(softmax_rows(s.value(x)), dy));
                       });
                 }});
  ops.push_back({"attention", 0, [](Rng& rng, GradCase& gc) {
                   const int n = rng.uniform_int(1, 8), m = rng.uniform_int(1, 8);
                   const int d = rng.uniform_int(1, 8), dv = rng.uniform_int(1, 8);
                   const auto q = gc.store.add("q", uniform_tensor(rng, n, d));
                   const auto k = gc.store.add("k", uniform_tensor(rng, m, d));
                   const auto v = gc.store.add("v", uniform_tensor(rng, m, dv));
                   AttentionMask mask(n, m);
                   for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = rng.bernoulli(0.3);
                   for (int i = 0; i < n; ++i) mask(i, rng.uniform_int(0, m - 1)) = false;
                   gc.loss = probe(
                       uniform_tensor(rng, n, dv),
                       [=](ParamStore& s) { return attention(s.value(q), s.value(k), s.value(v), &mask).out; },
                       [=](ParamStore& s, const Tensor2& dy) {
                         const auto o = attention(s.value(q), s.value(k), s.value(v), &mask);
                         const auto g = attention_backward(s.value(q), s.value(k), s.value(v), o.weights, dy);
                         s.accumulate(q, g.dq);
                         s.accumulate(k, g.dk);
                         s.accumulate(v, g.dv);
                       });
                 }});
  ops.push_back({"layer_norm", 0, [](Rng& rng, GradCase& gc) {
                   const int n = rng.uniform_int(1, 8), d = rng.uniform_int(2, 8);
                   const auto x = gc.store.add("x", uniform_tensor(rng, n, d, 2.0));
                   const auto gain = gc.store.add("gain", uniform_tensor(rng, 1, d));
                   const auto bias = gc.store.add("bias", uniform_tensor(rng, 1, d));
                   gc.loss = probe(
                       uniform_tensor(rng, n, d),
                       [=](ParamStore& s) { return layer_norm(s.value(x), s.value(gain), s.value(bias)).y; },
                       [=](ParamStore& s, const Tensor2& dy) {
                         const auto o = layer_norm(s.value(x), s.value(gain), s.value(bias));
                         const auto g = layer_norm_backward(o, s.value(gain), dy);
                         s.accumulate(x, g.dx);
                         s.accumulate(gain, g.dgain);
                         s.accumulate(bias, g.dbias);
                       });
                 }});
  ops.push_back({"gelu", 0, [](Rng& rng, GradCase& gc) {
                   const int n = rng.uniform_int(1, 8), m = rng.uniform_int(1, 8);
                   const auto x = gc.store.add("x", uniform_tensor(rng, n, m, 3.0));
                   gc.loss = probe(
                       uniform_tensor(rng, n, m), [=](ParamStore& s) { return gelu(s.value(x)); },
                       [=](ParamStore& s, const Tensor2& dy) { s.accumulate(x, gelu_backward(s.value(x), dy)); });
                 }});
  ops.push_back({"sigmoid", 0, [](Rng& rng, GradCase& gc) {
                   const int n = rng.uniform_int(1, 8), m = rng.uniform_int(1, 8);
                   const auto x = gc.store.add("x", uniform_tensor(rng, n, m, 3.0));
                   gc.loss = probe(
                       uniform_tensor(rng, n, m), [=](ParamStore& s) { return sigmoid(s.value(x)); },
                       [=](ParamStore& s, const Tensor2& dy) {
                         s.accumulate(x, sigmoid_backward(sigmoid(s.value(x)), dy));
                       });
                 }});
  ops.push_back({"mha", 0, [](Rng& rng, GradCase& gc) {
                   const int heads = rng.uniform_int(1, 2), d = 4 * heads;
                   const int n = rng.uniform_int(1, 6), m = rng.uniform_int(1, 6);
                   const auto p = make_mha(gc.store, "mha", d, heads, rng);
                   const auto xq = gc.store.add("xq", uniform_tensor(rng, n, d));
                   const auto xk = gc.store.add("xk", uniform_tensor(rng, m, d));
                   const auto xv = gc.store.add("xv", uniform_tensor(rng, m, d));
                   gc.loss = probe(
                       uniform_tensor(rng, n, d),
                       [=](ParamStore& s) {
                         MhaCache c;
                         return mha_forward(s, p, s.value(xq), s.value(xk), s.value(xv), nullptr, c);
                       },
                       [=](ParamStore& s, const Tensor2& dy) {
                         MhaCache c;
                         mha_forward(s, p, s.value(xq), s.value(xk), s.value(xv), nullptr, c);
                         const auto g = mha_backward(s, p, c, dy);
                         s.accumulate(xq, g.dxq);
                         s.accumulate(xk, g.dxk);
                         s.accumulate(xv, g.dxv);
                       });
                 }});
  return ops;
}

inline std::vector<SuiteOp> module_ops() {
  std::vector<SuiteOp> ops;
  for (auto mode : {FusionMode::none, FusionMode::mean, FusionMode::feed_forward, FusionMode::self_attention}) {
    ops.push_back({"fusion." + std::string(to_string(mode)), 1, [mode](Rng& rng, GradCase& gc) {
                     const auto p = make_fusion(gc.store, "fuse", mode, 5, 3, rng);
                     const auto x = gc.store.add("x", uniform_tensor(rng, 6, 5));
                     gc.loss = probe(
                         uniform_tensor(rng, 6, 5),
                         [=](ParamStore& s) {
                           FusionCache c;
                           return fuse_forward(s, p, s.value(x), c);
                         },
                         [=](ParamStore& s, const Tensor2& dy) {
                           FusionCache c;
                           fuse_forward(s, p, s.value(x), c);
                           s.accumulate(x, fuse_backward(s, p, c, dy));
                         });
                   }});
  }
  for (auto scheme : {QueryScheme::naive, QueryScheme::hierarchical, QueryScheme::hybrid}) {
    ops.push_back({"queries." + std::string(to_string(scheme)), 1, [scheme](Rng& rng, GradCase& gc) {
                     const QueryConfig qc{2, 3, 4};
                     const auto tables = init_query_tables(scheme, qc, rng);
                     const Tensor2 no_instance = tables.instance;
                     std::optional<ParamId> inst;
                     if (tables.instance.size() > 0) inst = gc.store.add("instance", tables.instance);
                     const auto point = gc.store.add("point", tables.point);
                     gc.loss = probe(
                         uniform_tensor(rng, 6, 4),
                         [=](ParamStore& s) {
                           return assemble_queries(scheme, qc, inst ? s.value(*inst) : no_instance, s.value(point)).queries;
                         },
                         [=](ParamStore& s, const Tensor2& dy) {
                           const auto g = assemble_queries_backward(scheme, qc, dy);
                           if (inst) s.accumulate(*inst, g.instance);
                           s.accumulate(point, g.point);
                         });
                   }});
  }
  const std::vector<std::pair<MaskMode, Placement>> variants = {
      {MaskMode::masked, Placement::after_cross},
      {MaskMode::masked, Placement::before_cross},
      {MaskMode::no_mask_attn, Placement::after_cross},
      {MaskMode::off, Placement::after_cross},
  };
  for (const auto& [mode, place] : variants) {
    const std::string name = "decoder_layer." + std::string(to_string(mode)) + "." + std::string(to_string(place));
    ops.push_back({name, 1, [mode, place](Rng& rng, GradCase& gc) {
                     DecoderOptions o;
                     o.dim = 8;
                     o.heads = 2;
                     o.layers = 1;
                     o.mask_mode = mode;
                     o.placement = place;
                     const auto layer = make_decoder_layer(gc.store, "dec.0", o, rng);
                     const auto q = gc.store.add("in.q", uniform_tensor(rng, 6, 8));
                     const auto k = gc.store.add("in.keys", uniform_tensor(rng, 5, 8));
                     const auto v = gc.store.add("in.values", uniform_tensor(rng, 5, 8));
                     const auto mask = build_instance_mask(instance_layout({2, 3, 1}), 0.0, nullptr, false);
                     const bool masked = mode == MaskMode::masked;
                     gc.loss = probe(
                         uniform_tensor(rng, 6, 8),
                         [=](ParamStore& s) {
                           DecoderLayerCache c;
                           return decoder_layer(s, layer, s.value(q), s.value(k), s.value(v), masked ? &mask : nullptr, c);
                         },
                         [=](ParamStore& s, const Tensor2& dy) {
                           DecoderLayerCache c;
                           decoder_layer(s, layer, s.value(q), s.value(k), s.value(v), masked ? &mask : nullptr, c);
                           const auto g = decoder_layer_backward(s, layer, c, dy);
                           s.accumulate(q, g.dqueries);
                           s.accumulate(k, g.dkeys);
                           s.accumulate(v, g.dvalues);
                         });
                   }});
  }
  ops.push_back({"decoder_stack", 1, [](Rng& rng, GradCase& gc) {
                   DecoderOptions o;
                   o.dim = 8;
                   o.heads = 2;
                   o.layers = 2;
                   o.epsilon = 0.3;
                   const auto st = make_decoder_stack(gc.store, "dec", o, rng);
                   const auto q = gc.store.add("in.q", uniform_tensor(rng, 6, 8));
                   const auto k = gc.store.add("in.keys", uniform_tensor(rng, 4, 8));
                   const auto v = gc.store.add("in.values", uniform_tensor(rng, 4, 8));
                   const std::vector<Tensor2> r = {uniform_tensor(rng, 6, 8), uniform_tensor(rng, 6, 8)};
                   const auto masks = draw_layer_masks(o, instance_layout({2, 3, 1}), &rng, true);
                   gc.loss = [=](ParamStore& s, bool with_grad) {
                     DecoderStackCache c;
                     const auto outs = decoder_stack(s, st, s.value(q), s.value(k), s.value(v), masks, c);
                     if (with_grad) {
                       const auto g = decoder_stack_backward(s, st, c, r);
                       s.accumulate(q, g.dqueries);
                       s.accumulate(k, g.dkeys);
                       s.accumulate(v, g.dvalues);
                     }
                     return inner(outs[0], r[0]) + inner(outs[1], r[1]);
                   };
                 }});
  return ops;
}

/// Detector checks own their parameters inside the Detector, so they run
/// outside the GradCase plumbing.
struct DetectorCase {
  std::string name;
  std::function<GradCheckReport(const GradCheckOptions&, bool inject)> run;
};

inline LossFn maybe_corrupt(LossFn f, bool inject) {
  if (!inject) return f;
  return [f = std::move(f)](ParamStore& s, bool with_grad) {
    const double v = f(s, with_grad);
    if (with_grad) s.scale_grads(1.01);
    return v;
  };
}

inline std::vector<DetectorCase> detector_cases(std::uint64_t seed) {
  std::vector<DetectorCase> out;
  out.push_back({"bev_encoder", [seed](const GradCheckOptions& opt, bool inject) {
                   auto c = micro_detector_config(QueryScheme::hybrid);
                   c.seed = seed;
                   Detector d = make_detector(c, BevShape{20, 20, kNumClasses, c.patch}, kMicroRange);
                   const auto patches = patchify(rasterize(micro_scene(), kMicroResolution, kMicroRange), d.shape);
                   Rng rng(child_seed(seed, 11));
                   const Tensor2 r = uniform_tensor(rng, d.shape.tokens(), c.dim);
                   ParamStore view;
                   const auto w = view.add("encoder.w", d.params.value(d.encoder.w));
                   const auto b = view.add("encoder.b", d.params.value(*d.encoder.b));
                   auto f = [&](ParamStore& s, bool with_grad) {
                     d.params.value(d.encoder.w) = s.value(w);
                     d.params.value(*d.encoder.b) = s.value(b);
                     const auto enc = encode_bev(d, patches);
                     if (with_grad) {
                       d.params.zero_grads();
                       encode_bev_backward(d, patches, r);
                       s.accumulate(w, d.params.grad(d.encoder.w));
                       s.accumulate(b, d.params.grad(*d.encoder.b));
                     }
                     return inner(enc.keys, r);
                   };
                   return grad_check(maybe_corrupt(f, inject), view, opt);
                 }});
  for (auto scheme : {QueryScheme::naive, QueryScheme::hierarchical, QueryScheme::hybrid}) {
    out.push_back({"detector." + std::string(to_string(scheme)), [scheme, seed](const GradCheckOptions& opt, bool inject) {
                     auto c = micro_detector_config(scheme);
                     c.seed = seed;
                     Detector d = make_detector(c, BevShape{20, 20, kNumClasses, c.patch}, kMicroRange);
                     const auto gts = micro_scene();
                     const auto patches = patchify(rasterize(gts, kMicroResolution, kMicroRange), d.shape);
                     const auto targets = make_targets(gts, c.n_points, kMicroRange);
                     Rng rng(child_seed(seed, 12));
                     StepPlan plan{draw_layer_masks(c.decoder_options(), d.instance_of, &rng, true), {}};
                     LossFn f = [&](ParamStore&, bool with_grad) {
                       return scene_loss(d, patches, targets, plan, with_grad).total();
                     };
                     return grad_check(maybe_corrupt(f, inject), d.params, opt);
                   }});
  }
  return out;
}

}  // namespace detail

/// Names of every check in suite order.
inline std::vector<std::string> grad_suite_ops() {
  std::vector<std::string> names;
  for (const auto& op : detail::primitive_ops()) names.push_back(op.name);
  for (const auto& op : detail::module_ops()) names.push_back(op.name);
  for (const auto& c : detail::detector_cases(0)) names.push_back(c.name);
  return names;
}

inline GradSuiteReport run_grad_suite(const GradSuiteOptions& opt = {}) {
  if (opt.trials < 1) throw UsageError("grad suite: trials must be >= 1");
  const auto names = grad_suite_ops();
  if (!opt.inject_bug.empty() && std::find(names.begin(), names.end(), opt.inject_bug) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw UsageError("unknown op '" + opt.inject_bug + "'; valid ops: " + valid);
  }
  using Clock = std::chrono::steady_clock;
  const auto start = Clock::now();
  const GradCheckOptions gopt{.rel_tol = opt.rel_tol};
  GradSuiteReport report;

  auto run_ops = [&](const std::vector<detail::SuiteOp>& ops) {
    for (std::size_t i = 0; i < ops.size(); ++i) {
      const auto& op = ops[i];
      const auto t0 = Clock::now();
      GradSuiteEntry e{op.name};
      e.trials = op.trials > 0 ? op.trials : opt.trials;
      const bool inject = op.name == opt.inject_bug;
      Rng rng(child_seed(opt.seed, fnv1a64(op.name)));
      for (int t = 0; t < e.trials; ++t) {
        detail::GradCase gc;
        op.make(rng, gc);
        const auto rep = grad_check(detail::maybe_corrupt(gc.loss, inject), gc.store, gopt);
        e.coords += rep.coords_checked;
        if (rep.max_rel_err >= e.max_rel_err) {
          e.max_rel_err = rep.max_rel_err;
          e.worst_param = rep.worst_param;
        }
      }
      e.pass = e.max_rel_err < opt.rel_tol;
      e.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
      report.entries.push_back(std::move(e));
    }
  };
  run_ops(detail::primitive_ops());
  run_ops(detail::module_ops());
  for (const auto& c : detail::detector_cases(opt.seed)) {
    const auto t0 = Clock::now();
    const auto rep = c.run(gopt, c.name == opt.inject_bug);
    GradSuiteEntry e{c.name, 1, rep.coords_checked, rep.max_rel_err, rep.worst_param};
    e.pass = e.max_rel_err < opt.rel_tol;
    e.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    report.entries.push_back(std::move(e));
  }
  report.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return report;
}

inline nlohmann::json grad_suite_json(const GradSuiteReport& r, double rel_tol) {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& e : r.entries) {
    ops.push_back({{"op", e.op},
                   {"trials", e.trials},
                   {"coords", e.coords},
                   {"max_rel_err", e.max_rel_err},
                   {"worst_param", e.worst_param},
                   {"seconds", e.seconds},
                   {"pass", e.pass}});
  }
  return {{"pass", r.pass()}, {"rel_tol", rel_tol}, {"seconds", r.seconds}, {"ops", ops}};
}

}  // namespace insight
