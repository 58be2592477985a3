#pragma once

// Toy point-set map detector: a patch encoder over the BEV raster, query
// generation and fusion, the decoder stack, class and point heads, the
// set-matching loss and the training loop.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/SparseCore>
#include <json.hpp>

#include "insight/config.hpp"
#include "insight/decoder.hpp"
#include "insight/hungarian.hpp"
#include "insight/metrics.hpp"
#include "insight/numcore/checkpoint.hpp"
#include "insight/numcore/ops.hpp"
#include "insight/numcore/params.hpp"
#include "insight/queries.hpp"
#include "insight/rng.hpp"
#include "insight/synthgen.hpp"

namespace insight {

/// Class index of an empty slot; the real classes use 0..kNumClasses-1.
inline constexpr int kNoObject = kNumClasses;
inline constexpr int kClassSlots = kNumClasses + 1;

// ------------------------------------------------------------------ config

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline int to_int(std::string_view key, std::string_view v) {
  const long long x = parse_int(key, v);
  if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
    throw UsageError("'" + std::string(key) + "' is out of range: " + std::string(v));
  }
  return static_cast<int>(x);
}

}  // namespace detail

enum class LrSchedule { constant, cosine };

inline std::string_view to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

/// Learning rate for step `t` (0-based) of `total`.
inline double scheduled_lr(LrSchedule s, double lr, std::size_t t, std::size_t total) {
  if (s == LrSchedule::constant || total == 0) return lr;
  const double pi = 3.14159265358979323846;
  return 0.5 * lr * (1.0 + std::cos(pi * static_cast<double>(t) / static_cast<double>(total)));
}

struct DetectorConfig {
  int n_instances = 12;
  int n_points = 8;
  int dim = 64;
  int layers = 3;
  int heads = 4;
  int patch = 10;
  double lambda_cls = 2.0;
  double lambda_pts = 5.0;
  /// CE weight of slots whose target is no-object.
  double no_object_weight = 1.0;
  double lr = 1e-3;
  /// `cosine` anneals lr to 0 over all training steps; `constant` keeps it.
  LrSchedule lr_schedule = LrSchedule::cosine;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  /// Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
  int epochs = 30;
  int batch_size = 4;
  std::uint64_t seed = 0;
  QueryScheme query_scheme = QueryScheme::hybrid;
  FusionMode fusion = FusionMode::self_attention;
  MaskMode mask = MaskMode::masked;
  Placement placement = Placement::after_cross;
  double epsilon = 0.1;
  /// Held-out scenes taken from the end of the dataset; 0 means 10% (at least one).
  int eval_scenes = 0;
  bool topo_centerline_only = false;

  void validate() const {
    auto need = [](bool ok, const std::string& what) {
      if (!ok) throw UsageError("invalid detector config: " + what);
    };
    need(n_instances >= 1, "n_instances must be >= 1");
    need(n_points >= 2, "n_points must be >= 2");
    need(dim >= 1 && heads >= 1 && dim % heads == 0, "dim must be a positive multiple of heads");
    need(layers >= 1, "layers must be >= 1");
    need(patch >= 1, "patch must be >= 1");
    need(lambda_cls >= 0.0 && lambda_pts >= 0.0 && no_object_weight >= 0.0, "loss weights must be >= 0");
    need(lr > 0.0 && adam_eps > 0.0, "lr and adam_eps must be positive");
    need(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must lie in [0, 1)");
    need(clip_norm >= 0.0, "clip_norm must be >= 0");
    need(epochs >= 0 && batch_size >= 1, "epochs must be >= 0 and batch_size >= 1");
    need(epsilon >= 0.0 && epsilon < 1.0, "epsilon must lie in [0, 1)");
    need(eval_scenes >= 0, "eval_scenes must be >= 0");
  }

  KeyValues to_key_values() const {
    KeyValues kv;
    kv.set("n_instances", std::to_string(n_instances));
    kv.set("n_points", std::to_string(n_points));
    kv.set("dim", std::to_string(dim));
    kv.set("layers", std::to_string(layers));
    kv.set("heads", std::to_string(heads));
    kv.set("patch", std::to_string(patch));
    kv.set("lambda_cls", detail::format_double(lambda_cls));
    kv.set("lambda_pts", detail::format_double(lambda_pts));
    kv.set("no_object_weight", detail::format_double(no_object_weight));
    kv.set("lr", detail::format_double(lr));
    kv.set("lr_schedule", std::string(to_string(lr_schedule)));
    kv.set("beta1", detail::format_double(beta1));
    kv.set("beta2", detail::format_double(beta2));
    kv.set("adam_eps", detail::format_double(adam_eps));
    kv.set("clip_norm", detail::format_double(clip_norm));
    kv.set("epochs", std::to_string(epochs));
    kv.set("batch_size", std::to_string(batch_size));
    kv.set("seed", std::to_string(seed));
    kv.set("query_scheme", std::string(to_string(query_scheme)));
    kv.set("fusion", std::string(to_string(fusion)));
    kv.set("mask", std::string(to_string(mask)));
    kv.set("placement", std::string(to_string(placement)));
    kv.set("epsilon", detail::format_double(epsilon));
    kv.set("eval_scenes", std::to_string(eval_scenes));
    kv.set("topo_centerline_only", topo_centerline_only ? "true" : "false");
    return kv;
  }

  /// Starts from the defaults and overrides every key present. Unknown keys
  /// and malformed values raise UsageError.
  static DetectorConfig from_key_values(const KeyValues& kv) {
    DetectorConfig c;
    for (const auto& key : kv.keys()) {
      const std::string& v = *kv.find(key);
      if (key == "n_instances") c.n_instances = detail::to_int(key, v);
      else if (key == "n_points") c.n_points = detail::to_int(key, v);
      else if (key == "dim") c.dim = detail::to_int(key, v);
      else if (key == "layers") c.layers = detail::to_int(key, v);
      else if (key == "heads") c.heads = detail::to_int(key, v);
      else if (key == "patch") c.patch = detail::to_int(key, v);
      else if (key == "lambda_cls") c.lambda_cls = parse_double(key, v);
      else if (key == "lambda_pts") c.lambda_pts = parse_double(key, v);
      else if (key == "no_object_weight") c.no_object_weight = parse_double(key, v);
      else if (key == "lr") c.lr = parse_double(key, v);
      else if (key == "lr_schedule") c.lr_schedule = parse_enum(key, v, std::array{LrSchedule::constant, LrSchedule::cosine});
      else if (key == "beta1") c.beta1 = parse_double(key, v);
      else if (key == "beta2") c.beta2 = parse_double(key, v);
      else if (key == "adam_eps") c.adam_eps = parse_double(key, v);
      else if (key == "clip_norm") c.clip_norm = parse_double(key, v);
      else if (key == "epochs") c.epochs = detail::to_int(key, v);
      else if (key == "batch_size") c.batch_size = detail::to_int(key, v);
      else if (key == "seed") {
        const long long s = parse_int(key, v);
        if (s < 0) throw UsageError("'seed' must be >= 0");
        c.seed = static_cast<std::uint64_t>(s);
      } else if (key == "query_scheme") {
        c.query_scheme = parse_enum(key, v, std::array{QueryScheme::naive, QueryScheme::hierarchical, QueryScheme::hybrid});
      } else if (key == "fusion") {
        c.fusion = parse_enum(key, v, std::array{FusionMode::none, FusionMode::mean, FusionMode::feed_forward,
                                                 FusionMode::self_attention});
      } else if (key == "mask") {
        c.mask = parse_enum(key, v, std::array{MaskMode::off, MaskMode::no_mask_attn, MaskMode::masked});
      } else if (key == "placement") {
        c.placement = parse_enum(key, v, std::array{Placement::after_cross, Placement::before_cross});
      } else if (key == "epsilon") c.epsilon = parse_double(key, v);
      else if (key == "eval_scenes") c.eval_scenes = detail::to_int(key, v);
      else if (key == "topo_centerline_only") c.topo_centerline_only = parse_bool(key, v);
      else throw UsageError("unknown config key '" + key + "'");
    }
    c.validate();
    return c;
  }

  static DetectorConfig from_text(std::string_view text) { return from_key_values(parse_key_values(text)); }

  std::string canonical() const { return to_key_values().canonical(); }
  std::uint64_t hash() const { return fnv1a64(canonical()); }

  /// Hash of the keys that shape the parameter set.
  std::uint64_t model_hash() const {
    const auto kv = to_key_values();
    std::string s;
    for (const char* k : {"n_instances", "n_points", "dim", "layers", "heads", "patch", "query_scheme", "fusion",
                          "mask", "placement"}) {
      s += std::string(k) + "=" + *kv.find(k) + "\n";
    }
    return fnv1a64(s);
  }

  QueryConfig query_config() const { return {n_instances, n_points, dim}; }

  DecoderOptions decoder_options() const { return {dim, heads, layers, mask, placement, epsilon}; }

  AdamConfig adam() const { return {lr, beta1, beta2, adam_eps}; }

  MetricConfig metric_config() const {
    MetricConfig m;
    m.topo_centerline_only = topo_centerline_only;
    return m;
  }
};

// ------------------------------------------------------------------ BEV encoder

struct BevShape {
  int height = 0;
  int width = 0;
  int channels = kNumClasses;
  int patch = 10;

  int grid_rows() const { return height / patch; }
  int grid_cols() const { return width / patch; }
  int tokens() const { return grid_rows() * grid_cols(); }
  int features() const { return patch * patch * channels; }

  void validate() const {
    if (height < 1 || width < 1 || channels < 1 || patch < 1 || height % patch != 0 || width % patch != 0) {
      throw ShapeError("BEV shape " + std::to_string(height) + "x" + std::to_string(width) + "x" +
                       std::to_string(channels) + " is not divisible into " + std::to_string(patch) + "-cell patches");
    }
  }

  static BevShape of(const BevRaster& r, int patch) {
    BevShape s{static_cast<int>(r.height), static_cast<int>(r.width), static_cast<int>(r.channels), patch};
    s.validate();
    return s;
  }

  friend bool operator==(const BevShape&, const BevShape&) = default;
};

/// Patch features, one row per token. Tokens run row-major over the patch
/// grid; feature (dy * P + dx) * C + c is cell (dy, dx) of the patch, channel c.
using PatchMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline PatchMatrix patchify(const BevRaster& r, const BevShape& shape) {
  shape.validate();
  if (static_cast<int>(r.height) != shape.height || static_cast<int>(r.width) != shape.width ||
      static_cast<int>(r.channels) != shape.channels) {
    throw ShapeError("raster " + std::to_string(r.height) + "x" + std::to_string(r.width) + "x" +
                     std::to_string(r.channels) + " does not match the configured " + std::to_string(shape.height) +
                     "x" + std::to_string(shape.width) + "x" + std::to_string(shape.channels));
  }
  const int p = shape.patch;
  const int ch = shape.channels;
  std::vector<Eigen::Triplet<double>> nz;
  for (int gr = 0; gr < shape.grid_rows(); ++gr) {
    for (int gc = 0; gc < shape.grid_cols(); ++gc) {
      const int token = gr * shape.grid_cols() + gc;
      for (int dy = 0; dy < p; ++dy) {
        for (int dx = 0; dx < p; ++dx) {
          for (int c = 0; c < ch; ++c) {
            const float v = r.at(static_cast<std::uint32_t>(gr * p + dy), static_cast<std::uint32_t>(gc * p + dx),
                                 static_cast<std::uint32_t>(c));
            if (v != 0.0f) nz.emplace_back(token, (dy * p + dx) * ch + c, static_cast<double>(v));
          }
        }
      }
    }
  }
  PatchMatrix m(shape.tokens(), shape.features());
  m.setFromTriplets(nz.begin(), nz.end());
  return m;
}

/// Fixed 2-D sinusoidal encodings. Frequency f fills four columns:
/// sin and cos of the patch column, then sin and cos of the patch row.
inline Tensor2 sinusoidal_positions(int grid_rows, int grid_cols, int d) {
  const int freqs = d / 4;
  Tensor2 pos = Tensor2::Zero(grid_rows * grid_cols, d);
  for (int gr = 0; gr < grid_rows; ++gr) {
    for (int gc = 0; gc < grid_cols; ++gc) {
      const int t = gr * grid_cols + gc;
      for (int f = 0; f < freqs; ++f) {
        const double w = std::pow(10000.0, -static_cast<double>(f) / static_cast<double>(freqs));
        pos(t, 4 * f) = std::sin(gc * w);
        pos(t, 4 * f + 1) = std::cos(gc * w);
        pos(t, 4 * f + 2) = std::sin(gr * w);
        pos(t, 4 * f + 3) = std::cos(gr * w);
      }
    }
  }
  return pos;
}

// ------------------------------------------------------------------ model

struct Detector {
  DetectorConfig config;
  BevShape shape;
  RasterRange range;
  ParamStore params;
  Linear encoder;
  Tensor2 positions;
  std::optional<ParamId> instance_table;
  ParamId point_table;
  FusionParams fusion;
  DecoderStack decoder;
  Linear class_head;
  Linear point_head;
  std::vector<int> instance_of;
};

namespace detail {
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kShuffleStream = 2;
inline constexpr std::uint64_t kMaskStream = 3;
}  // namespace detail

inline Detector make_detector(const DetectorConfig& cfg, const BevShape& shape, const RasterRange& range = {}) {
  cfg.validate();
  shape.validate();
  if (shape.patch != cfg.patch) throw ShapeError("BEV shape patch does not match the config");
  Detector d;
  d.config = cfg;
  d.shape = shape;
  d.range = range;
  Rng rng(child_seed(cfg.seed, detail::kInitStream));
  d.encoder = make_linear(d.params, "encoder", shape.features(), cfg.dim, rng);
  d.positions = sinusoidal_positions(shape.grid_rows(), shape.grid_cols(), cfg.dim);
  const auto qc = cfg.query_config();
  auto tables = init_query_tables(cfg.query_scheme, qc, rng);
  if (cfg.query_scheme != QueryScheme::naive) d.instance_table = d.params.add("query.instance", std::move(tables.instance));
  d.point_table = d.params.add("query.point", std::move(tables.point));
  d.fusion = make_fusion(d.params, "fusion", cfg.fusion, cfg.dim, cfg.n_points, rng);
  d.decoder = make_decoder_stack(d.params, "decoder", cfg.decoder_options(), rng);
  d.class_head = make_linear(d.params, "head.class", cfg.dim, kClassSlots, rng);
  d.point_head = make_linear(d.params, "head.point", cfg.dim, 2, rng);
  d.instance_of = instance_layout(qc);
  return d;
}

struct BevEncoding {
  Tensor2 keys;
  Tensor2 values;
  Tensor2 positions;
};

/// Affine patch embedding plus positional encoding. Keys and values are the
/// same tensor.
inline BevEncoding encode_bev(const Detector& d, const PatchMatrix& patches) {
  if (patches.rows() != d.shape.tokens() || patches.cols() != d.shape.features()) {
    throw ShapeError("encode_bev: patches " + shape_str(patches.rows(), patches.cols()) + ", expected " +
                     shape_str(d.shape.tokens(), d.shape.features()));
  }
  BevEncoding e;
  e.keys = patches * d.params.value(d.encoder.w);
  e.keys.rowwise() += d.params.value(*d.encoder.b).row(0);
  e.keys += d.positions;
  e.values = e.keys;
  e.positions = d.positions;
  return e;
}

inline BevEncoding encode_bev(const Detector& d, const BevRaster& r) { return encode_bev(d, patchify(r, d.shape)); }

inline void encode_bev_backward(Detector& d, const PatchMatrix& patches, const Tensor2& dmemory) {
  d.params.accumulate(d.encoder.w, patches.transpose() * dmemory);
  d.params.accumulate(*d.encoder.b, dmemory.colwise().sum());
}

struct HeadOutput {
  Tensor2 query_logits;  // one row per query
  Tensor2 logits;        // one row per instance: mean of its queries' logits
  Tensor2 probs;
  Tensor2 points;  // one row per query, normalized to [0, 1]^2
};

struct ForwardCache {
  BevEncoding bev;
  QuerySet queries;
  FusionCache fusion;
  Tensor2 fused;
  DecoderStackCache decoder;
  std::vector<Tensor2> layer_out;
  std::vector<HeadOutput> heads;
};

inline HeadOutput apply_heads(const Detector& d, const Tensor2& h) {
  const int np = d.config.n_points;
  HeadOutput o;
  o.query_logits = linear_forward(d.params, d.class_head, h);
  o.logits.resize(d.config.n_instances, kClassSlots);
  for (int i = 0; i < d.config.n_instances; ++i) {
    o.logits.row(i) = o.query_logits.middleRows(i * np, np).colwise().mean();
  }
  o.probs = softmax_rows(o.logits);
  o.points = sigmoid(linear_forward(d.params, d.point_head, h));
  return o;
}

/// Full forward pass with the given per-layer masks (see draw_layer_masks).
inline void forward(const Detector& d, const PatchMatrix& patches, const std::vector<AttentionMask>& masks,
                    ForwardCache& c) {
  c.bev = encode_bev(d, patches);
  const Tensor2 empty;
  c.queries = assemble_queries(d.config.query_scheme, d.config.query_config(),
                               d.instance_table ? d.params.value(*d.instance_table) : empty,
                               d.params.value(d.point_table));
  c.fused = fuse_forward(d.params, d.fusion, c.queries.queries, c.fusion);
  c.layer_out = decoder_stack(d.params, d.decoder, c.fused, c.bev.keys, c.bev.values, masks, c.decoder);
  c.heads.clear();
  for (const auto& h : c.layer_out) c.heads.push_back(apply_heads(d, h));
}

// ------------------------------------------------------------------ targets and matching

inline Point2 normalize_point(Point2 p, const RasterRange& r) {
  return {(p.x - r.x_min) / (r.x_max - r.x_min), (p.y - r.y_min) / (r.y_max - r.y_min)};
}

inline Point2 denormalize_point(double u, double v, const RasterRange& r) {
  return {r.x_min + u * (r.x_max - r.x_min), r.y_min + v * (r.y_max - r.y_min)};
}

/// A ground-truth instance resampled to n_p points in normalized coordinates.
struct Target {
  ElementClass cls = ElementClass::divider;
  InstanceKind kind = InstanceKind::polyline;
  Tensor2 points;
};

inline Target make_target(const SampledInstance& s, const RasterRange& range) {
  Target t{s.cls, s.kind, Tensor2(static_cast<Eigen::Index>(s.points.size()), 2)};
  for (std::size_t k = 0; k < s.points.size(); ++k) {
    const Point2 p = normalize_point(s.points[k], range);
    t.points(static_cast<Eigen::Index>(k), 0) = p.x;
    t.points(static_cast<Eigen::Index>(k), 1) = p.y;
  }
  return t;
}

inline std::vector<Target> make_targets(std::span<const Instance> gts, int n_points, const RasterRange& range) {
  std::vector<Target> out;
  out.reserve(gts.size());
  for (const auto& g : gts) out.push_back(make_target(resample(g, n_points), range));
  return out;
}

/// Point correspondences that describe the same shape. Entry o[k] is the
/// target point paired with predicted point k. Polylines: forward, reversed.
/// Polygons: every cyclic shift forward, then every cyclic shift reversed.
inline std::vector<std::vector<int>> equivalent_orderings(InstanceKind kind, int n) {
  std::vector<std::vector<int>> out;
  std::vector<int> o(static_cast<std::size_t>(n));
  if (kind == InstanceKind::polyline) {
    std::iota(o.begin(), o.end(), 0);
    out.push_back(o);
    std::reverse(o.begin(), o.end());
    out.push_back(o);
    return out;
  }
  for (int s = 0; s < n; ++s) {
    for (int k = 0; k < n; ++k) o[static_cast<std::size_t>(k)] = (s + k) % n;
    out.push_back(o);
  }
  for (int s = 0; s < n; ++s) {
    for (int k = 0; k < n; ++k) o[static_cast<std::size_t>(k)] = ((s - k) % n + n) % n;
    out.push_back(o);
  }
  return out;
}

inline double mean_l1(const Tensor2& pred, const Tensor2& target, std::span<const int> order) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < pred.rows(); ++k) {
    const Eigen::Index t = order[static_cast<std::size_t>(k)];
    s += std::abs(pred(k, 0) - target(t, 0)) + std::abs(pred(k, 1) - target(t, 1));
  }
  return s / static_cast<double>(pred.rows());
}

struct InstanceCost {
  double cost = 0.0;
  double point_term = 0.0;  // unweighted mean L1 under the best ordering
  int ordering = 0;         // index into equivalent_orderings; first minimum wins
};

/// cost = lambda_cls (1 - P(gt class)) + lambda_pts min_o mean_k L1(pred_k, gt_o[k]).
inline InstanceCost instance_cost(const Eigen::Ref<const Eigen::RowVectorXd>& probs, const Tensor2& pred_points,
                                  const Target& gt, double lambda_cls, double lambda_pts) {
  if (pred_points.rows() != gt.points.rows() || pred_points.cols() != 2 || gt.points.cols() != 2) {
    throw ShapeError("instance_cost: prediction " + shape_str(pred_points) + " vs target " + shape_str(gt.points));
  }
  if (probs.size() != kClassSlots) throw ShapeError("instance_cost: class distribution has " + std::to_string(probs.size()) + " entries");
  const auto orders = equivalent_orderings(gt.kind, static_cast<int>(gt.points.rows()));
  InstanceCost c;
  c.point_term = std::numeric_limits<double>::infinity();
  for (std::size_t o = 0; o < orders.size(); ++o) {
    const double l = mean_l1(pred_points, gt.points, orders[o]);
    if (l < c.point_term) {
      c.point_term = l;
      c.ordering = static_cast<int>(o);
    }
  }
  c.cost = lambda_cls * (1.0 - probs(static_cast<int>(gt.cls))) + lambda_pts * c.point_term;
  return c;
}

/// Slot assignment for one layer: slot_gt[i] is the target matched to slot i
/// or -1 (no-object); slot_ordering[i] the ordering used for its points.
struct SlotMatch {
  std::vector<int> slot_gt;
  std::vector<int> slot_ordering;
  double total_cost = 0.0;
};

inline SlotMatch match_instances(const HeadOutput& h, std::span<const Target> targets, int n_points, double lambda_cls,
                                 double lambda_pts) {
  const auto n_slots = static_cast<int>(h.probs.rows());
  const auto n_gt = static_cast<int>(targets.size());
  if (n_gt > n_slots) {
    throw Error("match_instances: " + std::to_string(n_gt) + " ground-truth instances exceed " +
                std::to_string(n_slots) + " slots");
  }
  Tensor2 cost(n_gt, n_slots);
  std::vector<std::vector<int>> ord(static_cast<std::size_t>(n_gt), std::vector<int>(static_cast<std::size_t>(n_slots)));
  for (int g = 0; g < n_gt; ++g) {
    for (int i = 0; i < n_slots; ++i) {
      const Tensor2 pts = h.points.middleRows(static_cast<Eigen::Index>(i) * n_points, n_points);
      const auto c = instance_cost(h.probs.row(i), pts, targets[static_cast<std::size_t>(g)], lambda_cls, lambda_pts);
      cost(g, i) = c.cost;
      ord[static_cast<std::size_t>(g)][static_cast<std::size_t>(i)] = c.ordering;
    }
  }
  const auto a = hungarian(cost);
  SlotMatch m;
  m.slot_gt = a.col_to_row;
  m.slot_ordering.assign(static_cast<std::size_t>(n_slots), 0);
  for (int i = 0; i < n_slots; ++i) {
    const int g = m.slot_gt[static_cast<std::size_t>(i)];
    if (g >= 0) m.slot_ordering[static_cast<std::size_t>(i)] = ord[static_cast<std::size_t>(g)][static_cast<std::size_t>(i)];
  }
  m.total_cost = a.total_cost;
  return m;
}

// ------------------------------------------------------------------ loss

struct LossTerms {
  double cls = 0.0;  // lambda_cls * weighted cross-entropy
  double pts = 0.0;  // lambda_pts * L1 point loss
  double total() const { return cls + pts; }

  LossTerms& operator+=(const LossTerms& o) {
    cls += o.cls;
    pts += o.pts;
    return *this;
  }
};

struct LayerLossGrad {
  Tensor2 dlogits;  // per instance
  Tensor2 dpoints;  // per query, normalized coordinates
};

/// Loss of one layer's heads under a fixed match. Cross-entropy is averaged
/// over slots with weight 1 for matched slots and no_object_weight for the
/// rest. The point term is the mean L1 per matched pair summed over pairs and
/// divided by max(1, #targets).
inline LossTerms layer_loss(const HeadOutput& h, std::span<const Target> targets, const SlotMatch& m,
                            const DetectorConfig& cfg, LayerLossGrad* grad) {
  const int n_slots = static_cast<int>(h.probs.rows());
  const int np = cfg.n_points;
  LossTerms t;
  if (grad) {
    grad->dlogits = Tensor2::Zero(n_slots, kClassSlots);
    grad->dpoints = Tensor2::Zero(h.points.rows(), 2);
  }
  double wsum = 0.0;
  for (int i = 0; i < n_slots; ++i) wsum += m.slot_gt[static_cast<std::size_t>(i)] >= 0 ? 1.0 : cfg.no_object_weight;
  for (int i = 0; i < n_slots && wsum > 0.0; ++i) {
    const int g = m.slot_gt[static_cast<std::size_t>(i)];
    const int target = g >= 0 ? static_cast<int>(targets[static_cast<std::size_t>(g)].cls) : kNoObject;
    const double w = (g >= 0 ? 1.0 : cfg.no_object_weight) / wsum;
    const double mx = h.logits.row(i).maxCoeff();
    const double lse = mx + std::log((h.logits.row(i).array() - mx).exp().sum());
    t.cls += cfg.lambda_cls * w * (lse - h.logits(i, target));
    if (grad) {
      grad->dlogits.row(i) = cfg.lambda_cls * w * h.probs.row(i);
      grad->dlogits(i, target) -= cfg.lambda_cls * w;
    }
  }
  const double denom = std::max<double>(1.0, static_cast<double>(targets.size()));
  for (int i = 0; i < n_slots; ++i) {
    const int g = m.slot_gt[static_cast<std::size_t>(i)];
    if (g < 0) continue;
    const auto& tp = targets[static_cast<std::size_t>(g)].points;
    const auto orders = equivalent_orderings(targets[static_cast<std::size_t>(g)].kind, np);
    const auto& o = orders[static_cast<std::size_t>(m.slot_ordering[static_cast<std::size_t>(i)])];
    const double scale = cfg.lambda_pts / (static_cast<double>(np) * denom);
    for (int k = 0; k < np; ++k) {
      const Eigen::Index row = static_cast<Eigen::Index>(i) * np + k;
      for (int a = 0; a < 2; ++a) {
        const double diff = h.points(row, a) - tp(o[static_cast<std::size_t>(k)], a);
        t.pts += scale * std::abs(diff);
        if (grad) grad->dpoints(row, a) = scale * (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0));
      }
    }
  }
  return t;
}

/// Everything random or discrete about one step, fixed so that repeated
/// evaluations of the loss (finite differences, resumed runs) agree.
struct StepPlan {
  std::vector<AttentionMask> masks;
  std::vector<SlotMatch> matches;  // per layer; filled on first use when empty
};

/// Summed loss over all decoder layers. With `with_grad` the gradients are
/// accumulated into the detector's parameter store.
inline LossTerms scene_loss(Detector& d, const PatchMatrix& patches, std::span<const Target> targets, StepPlan& plan,
                            bool with_grad) {
  const auto& cfg = d.config;
  ForwardCache c;
  forward(d, patches, plan.masks, c);
  if (plan.matches.empty()) {
    for (const auto& h : c.heads) plan.matches.push_back(match_instances(h, targets, cfg.n_points, cfg.lambda_cls, cfg.lambda_pts));
  }
  if (plan.matches.size() != c.heads.size()) throw Error("scene_loss: plan has the wrong number of layers");
  LossTerms total;
  std::vector<Tensor2> douts;
  for (std::size_t l = 0; l < c.heads.size(); ++l) {
    const auto& h = c.heads[l];
    LayerLossGrad g;
    total += layer_loss(h, targets, plan.matches[l], cfg, with_grad ? &g : nullptr);
    if (!with_grad) continue;
    Tensor2 dq_logits(h.query_logits.rows(), kClassSlots);
    for (Eigen::Index j = 0; j < dq_logits.rows(); ++j) {
      dq_logits.row(j) = g.dlogits.row(j / cfg.n_points) / static_cast<double>(cfg.n_points);
    }
    const Tensor2 dpre = sigmoid_backward(h.points, g.dpoints);
    Tensor2 dh = linear_backward(d.params, d.class_head, c.layer_out[l], dq_logits);
    dh += linear_backward(d.params, d.point_head, c.layer_out[l], dpre);
    douts.push_back(std::move(dh));
  }
  if (!with_grad) return total;
  const auto sg = decoder_stack_backward(d.params, d.decoder, c.decoder, douts);
  const Tensor2 dq0 = fuse_backward(d.params, d.fusion, c.fusion, sg.dqueries);
  const auto dt = assemble_queries_backward(cfg.query_scheme, cfg.query_config(), dq0);
  if (d.instance_table) d.params.accumulate(*d.instance_table, dt.instance);
  d.params.accumulate(d.point_table, dt.point);
  encode_bev_backward(d, patches, sg.dkeys + sg.dvalues);
  return total;
}

// ------------------------------------------------------------------ prediction

struct PredictedInstance {
  std::array<double, kClassSlots> class_probs{};
  double confidence = 0.0;  // 1 - P(no-object)
  ElementClass label = ElementClass::divider;  // most likely real class
  std::vector<Point2> points;  // metric coordinates
};

struct PredictionSet {
  std::vector<PredictedInstance> instances;

  friend bool operator==(const PredictionSet& a, const PredictionSet& b) {
    if (a.instances.size() != b.instances.size()) return false;
    for (std::size_t i = 0; i < a.instances.size(); ++i) {
      const auto& x = a.instances[i];
      const auto& y = b.instances[i];
      if (x.class_probs != y.class_probs || x.confidence != y.confidence || x.label != y.label || x.points != y.points) {
        return false;
      }
    }
    return true;
  }
};

inline PredictionSet predictions_from_head(const Detector& d, const HeadOutput& h) {
  PredictionSet ps;
  const int np = d.config.n_points;
  for (int i = 0; i < d.config.n_instances; ++i) {
    PredictedInstance p;
    for (int k = 0; k < kClassSlots; ++k) p.class_probs[static_cast<std::size_t>(k)] = h.probs(i, k);
    p.confidence = 1.0 - h.probs(i, kNoObject);
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k) {
      if (h.probs(i, k) > h.probs(i, best)) best = k;
    }
    p.label = static_cast<ElementClass>(best);
    for (int k = 0; k < np; ++k) {
      const Eigen::Index row = static_cast<Eigen::Index>(i) * np + k;
      p.points.push_back(denormalize_point(h.points(row, 0), h.points(row, 1), d.range));
    }
    ps.instances.push_back(std::move(p));
  }
  return ps;
}

/// Inference: deterministic block masks, last layer's heads.
inline PredictionSet predict(const Detector& d, const PatchMatrix& patches) {
  ForwardCache c;
  forward(d, patches, draw_layer_masks(d.config.decoder_options(), d.instance_of, nullptr, false), c);
  return predictions_from_head(d, c.heads.back());
}

inline PredictionSet predict(const Detector& d, const BevRaster& r) { return predict(d, patchify(r, d.shape)); }

/// Slot indices by descending confidence; ties keep slot order.
inline std::vector<int> confidence_order(const PredictionSet& ps) {
  std::vector<int> idx(ps.instances.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return ps.instances[static_cast<std::size_t>(a)].confidence > ps.instances[static_cast<std::size_t>(b)].confidence;
  });
  return idx;
}

/// Predictions as metric instances; polygons are closed explicitly.
inline std::vector<ScoredInstance> scored_instances(const PredictionSet& ps) {
  std::vector<ScoredInstance> out;
  for (const auto& p : ps.instances) {
    ScoredInstance s;
    s.instance.cls = p.label;
    s.instance.kind = kind_for_class(p.label);
    s.instance.points = p.points;
    if (s.instance.kind == InstanceKind::polygon) s.instance.points.push_back(p.points.front());
    s.confidence = p.confidence;
    out.push_back(std::move(s));
  }
  return out;
}

// ------------------------------------------------------------------ data

/// A scene prepared for the detector.
struct Sample {
  int scene_id = 0;
  PatchMatrix patches;
  std::vector<Target> targets;
  std::vector<Instance> gts;
};

inline Sample make_sample(const SceneRecord& s, const Detector& d) {
  return {s.scene_id, patchify(s.raster, d.shape), make_targets(s.instances, d.config.n_points, d.range), s.instances};
}

inline std::vector<Sample> make_samples(std::span<const SceneRecord> scenes, const Detector& d) {
  std::vector<Sample> out;
  out.reserve(scenes.size());
  for (const auto& s : scenes) out.push_back(make_sample(s, d));
  return out;
}

/// Number of held-out scenes for a dataset of `n` scenes.
inline std::size_t eval_count(std::size_t n, const DetectorConfig& cfg) {
  const std::size_t e = cfg.eval_scenes > 0 ? static_cast<std::size_t>(cfg.eval_scenes) : std::max<std::size_t>(1, n / 10);
  if (e >= n) {
    throw UsageError("dataset of " + std::to_string(n) + " scenes leaves no training scenes after holding out " +
                     std::to_string(e));
  }
  return e;
}

inline MetricsReport evaluate_detector(const Detector& d, std::span<const Sample> samples) {
  std::vector<SceneEval> scenes;
  scenes.reserve(samples.size());
  for (const auto& s : samples) scenes.push_back({scored_instances(predict(d, s.patches)), s.gts});
  return evaluate(scenes, d.config.metric_config());
}

// ------------------------------------------------------------------ checkpoint

/// Parameters, optimizer moments and training progress.
inline std::vector<NamedTensor> detector_tensors(const Detector& d, const AdamState& adam, int epochs_done) {
  std::vector<NamedTensor> out;
  for (const auto& e : d.params.entries()) out.push_back({e.name, e.value});
  for (std::size_t i = 0; i < adam.m.size(); ++i) out.push_back({"adam.m." + d.params.entries()[i].name, adam.m[i]});
  for (std::size_t i = 0; i < adam.v.size(); ++i) out.push_back({"adam.v." + d.params.entries()[i].name, adam.v[i]});
  Tensor2 progress(1, 2);
  progress << epochs_done, static_cast<double>(adam.step);
  out.push_back({"train.progress", progress});
  const std::uint64_t h = d.config.model_hash();
  Tensor2 hash(1, 2);
  hash << static_cast<double>(h >> 32), static_cast<double>(h & 0xffffffffULL);
  out.push_back({"train.model_hash", hash});
  return out;
}

/// Restores parameters (and optimizer state when `adam` is given) into a
/// detector built from the same config. Returns the completed epoch count.
inline int restore_detector(Detector& d, const std::vector<NamedTensor>& tensors, AdamState* adam) {
  std::map<std::string, const Tensor2*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.value;
  auto get = [&](const std::string& name) -> const Tensor2& {
    const auto it = by_name.find(name);
    if (it == by_name.end()) throw StateMismatchError("checkpoint has no tensor '" + name + "'");
    return *it->second;
  };
  const Tensor2& hash = get("train.model_hash");
  const std::uint64_t want = d.config.model_hash();
  if (hash.size() != 2 || hash(0) != static_cast<double>(want >> 32) ||
      hash(1) != static_cast<double>(want & 0xffffffffULL)) {
    throw StateMismatchError("checkpoint was written for a different model configuration");
  }
  auto& entries = d.params.entries();
  const std::size_t expected = entries.size() * 3 + 2;
  if (tensors.size() != expected) {
    throw StateMismatchError("checkpoint holds " + std::to_string(tensors.size()) + " tensors, expected " +
                             std::to_string(expected));
  }
  auto copy = [&](const std::string& name, Tensor2& dst) {
    const Tensor2& src = get(name);
    if (src.rows() != dst.rows() || src.cols() != dst.cols()) {
      throw StateMismatchError("checkpoint tensor '" + name + "' is " + shape_str(src) + ", model expects " +
                               shape_str(dst));
    }
    dst = src;
  };
  for (auto& e : entries) copy(e.name, e.value);
  const Tensor2& progress = get("train.progress");
  if (adam) {
    for (std::size_t i = 0; i < entries.size(); ++i) {
      copy("adam.m." + entries[i].name, adam->m[i]);
      copy("adam.v." + entries[i].name, adam->v[i]);
    }
    adam->step = static_cast<long>(progress(1));
  }
  return static_cast<int>(progress(0));
}

// ------------------------------------------------------------------ training

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  double map = 0.0;
  double topo = 0.0;

  nlohmann::ordered_json to_json() const { return {{"epoch", epoch}, {"loss", loss}, {"mAP", map}, {"TOPO", topo}}; }
};

struct TrainOptions {
  std::filesystem::path out_dir;
  bool resume = false;
  /// Stop after this many completed epochs (0: run the configured number).
  int stop_after = 0;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  Detector detector;
  std::vector<EpochRecord> log;
  MetricsReport final_report;
};

inline constexpr const char* kCheckpointFile = "checkpoint.imck";
inline constexpr const char* kLogFile = "log.jsonl";
inline constexpr const char* kConfigFile = "config.cfg";

namespace detail {

inline double grad_norm(const ParamStore& s) {
  double sq = 0.0;
  for (const auto& e : s.entries()) sq += e.grad.squaredNorm();
  return std::sqrt(sq);
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f << text;
  if (!f) throw Error("write failed: " + p.string());
}

}  // namespace detail

/// Trains on all but the last eval_count() scenes and evaluates on those
/// after every epoch. Writes config.cfg, log.jsonl (a header line, then one
/// line per epoch) and checkpoint.imck into `opt.out_dir`. With `opt.resume`
/// the run continues from the checkpoint and reproduces the uninterrupted
/// run bit for bit.
inline TrainResult train(std::span<const SceneRecord> scenes, const DetectorConfig& cfg, const TrainOptions& opt) {
  cfg.validate();
  if (scenes.empty()) throw UsageError("train: dataset is empty");
  const std::size_t n_eval = eval_count(scenes.size(), cfg);
  const auto train_scenes = scenes.first(scenes.size() - n_eval);
  const auto eval_scenes = scenes.last(n_eval);
  std::size_t max_gt = 0;
  for (const auto& s : scenes) max_gt = std::max(max_gt, s.instances.size());
  if (max_gt > static_cast<std::size_t>(cfg.n_instances)) {
    throw UsageError("n_instances = " + std::to_string(cfg.n_instances) + " is below the " + std::to_string(max_gt) +
                     " instances of the largest scene");
  }

  TrainResult r{make_detector(cfg, BevShape::of(scenes.front().raster, cfg.patch)), {}, {}};
  Detector& d = r.detector;
  const auto train_samples = make_samples(train_scenes, d);
  const auto eval_samples = make_samples(eval_scenes, d);
  AdamState adam(d.params);
  auto adam_cfg = cfg.adam();

  std::filesystem::create_directories(opt.out_dir);
  const auto ckpt_path = opt.out_dir / kCheckpointFile;
  const auto log_path = opt.out_dir / kLogFile;
  nlohmann::ordered_json header{{"format", "insight-train-log"},
                                {"version", 1},
                                {"config_hash", hex64(cfg.hash())},
                                {"seed", cfg.seed},
                                {"train_scenes", train_scenes.size()},
                                {"eval_scenes", eval_scenes.size()}};
  int start = 0;
  if (opt.resume) {
    start = restore_detector(d, read_checkpoint(ckpt_path.string()), &adam);
    std::ifstream in(log_path);
    std::string line;
    if (!std::getline(in, line) || nlohmann::json::parse(line).value("config_hash", "") != hex64(cfg.hash())) {
      throw StateMismatchError("log header in " + log_path.string() + " does not match the config");
    }
    while (static_cast<int>(r.log.size()) < start && std::getline(in, line)) {
      const auto j = nlohmann::json::parse(line);
      r.log.push_back({j.at("epoch").get<int>(), j.at("loss").get<double>(), j.at("mAP").get<double>(),
                       j.at("TOPO").get<double>()});
    }
    if (static_cast<int>(r.log.size()) != start) throw StateMismatchError("log is shorter than the checkpoint progress");
  }
  detail::write_text(opt.out_dir / kConfigFile, cfg.canonical());
  std::string log_text = header.dump() + "\n";
  for (const auto& e : r.log) log_text += e.to_json().dump() + "\n";
  detail::write_text(log_path, log_text);

  const int stop = opt.stop_after > 0 ? std::min(opt.stop_after, cfg.epochs) : cfg.epochs;
  std::vector<std::size_t> order(train_samples.size());
  const std::size_t steps_per_epoch = (order.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                      static_cast<std::size_t>(cfg.batch_size);
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(cfg.epochs);
  for (int epoch = start; epoch < stop; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(child_seed(cfg.seed, detail::kShuffleStream, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    const std::uint64_t mask_seed = child_seed(cfg.seed, detail::kMaskStream, static_cast<std::uint64_t>(epoch));
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.batch_size));
      d.params.zero_grads();
      for (std::size_t pos = b; pos < end; ++pos) {
        const auto& s = train_samples[order[pos]];
        Rng mask_rng(child_seed(mask_seed, pos));
        StepPlan plan{draw_layer_masks(cfg.decoder_options(), d.instance_of, &mask_rng, true), {}};
        const auto terms = scene_loss(d, s.patches, s.targets, plan, true);
        if (!std::isfinite(terms.total())) {
          throw Error("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(pos) +
                      " (scene " + std::to_string(s.scene_id) + "; cls " + std::to_string(terms.cls) + ", pts " +
                      std::to_string(terms.pts) + ")");
        }
        loss_sum += terms.total();
      }
      d.params.scale_grads(1.0 / static_cast<double>(end - b));
      if (cfg.clip_norm > 0.0) {
        const double norm = detail::grad_norm(d.params);
        if (norm > cfg.clip_norm) d.params.scale_grads(cfg.clip_norm / norm);
      }
      const std::size_t step = static_cast<std::size_t>(epoch) * steps_per_epoch + b / static_cast<std::size_t>(cfg.batch_size);
      adam_cfg.lr = scheduled_lr(cfg.lr_schedule, cfg.lr, step, total_steps);
      adam_step(d.params, adam, adam_cfg);
    }
    const auto report = evaluate_detector(d, eval_samples);
    const EpochRecord rec{epoch + 1, loss_sum / static_cast<double>(order.size()), report.map, report.topo.f1};
    r.log.push_back(rec);
    {
      std::ofstream f(log_path, std::ios::binary | std::ios::app);
      f << rec.to_json().dump() << "\n";
      if (!f) throw Error("write failed: " + log_path.string());
    }
    write_checkpoint(ckpt_path.string(), detector_tensors(d, adam, epoch + 1));
    if (opt.on_epoch) opt.on_epoch(rec);
  }
  if (start >= stop) write_checkpoint(ckpt_path.string(), detector_tensors(d, adam, start));
  r.final_report = evaluate_detector(d, eval_samples);
  return r;
}

/// Builds a detector for `cfg` and loads the checkpoint's parameters.
inline Detector load_detector(const DetectorConfig& cfg, const BevShape& shape, const std::string& checkpoint_path) {
  Detector d = make_detector(cfg, shape);
  AdamState adam(d.params);
  restore_detector(d, read_checkpoint(checkpoint_path), &adam);
  return d;
}

}  // namespace insight
