#pragma once

// Chamfer-distance AP over distance thresholds, mAP, and the TOPO
// reachability metric.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "insight/error.hpp"
#include "insight/geometry.hpp"

namespace insight {

enum class ApIntegration { area, points101 };

struct MetricConfig {
  std::vector<double> taus{0.5, 1.0, 1.5};
  double topo_step = 0.15;
  double match_radius = 0.5;
  double propagation_radius = 5.0;
  /// Points per instance when densifying for Chamfer distance.
  int chamfer_samples = 100;
  ApIntegration integration = ApIntegration::area;
  bool topo_centerline_only = false;
  /// Predictions below this confidence are left out of the TOPO graph.
  double topo_min_confidence = 0.5;

  void validate() const {
    if (taus.empty() || !std::is_sorted(taus.begin(), taus.end()) || taus.front() <= 0.0) {
      throw Error("metric taus must be positive and sorted ascending");
    }
    if (!(topo_step > 0.0 && match_radius > 0.0 && propagation_radius > 0.0)) {
      throw Error("TOPO step and radii must be positive");
    }
    if (chamfer_samples < 2) throw Error("chamfer_samples must be >= 2");
  }
};

// ------------------------------------------------------------------ chamfer

/// Symmetric mean-of-means Chamfer distance.
inline double chamfer(std::span<const Point2> p, std::span<const Point2> q) {
  if (p.empty() || q.empty()) throw Error("chamfer: empty point set");
  auto directed = [](std::span<const Point2> a, std::span<const Point2> b) {
    double sum = 0.0;
    for (const auto& x : a) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& y : b) {
        const double dx = x.x - y.x, dy = x.y - y.y;
        best = std::min(best, dx * dx + dy * dy);
      }
      sum += std::sqrt(best);
    }
    return sum / static_cast<double>(a.size());
  };
  return 0.5 * (directed(p, q) + directed(q, p));
}

// ------------------------------------------------------------------ AP

/// Shape kind that instances of a class take: crossings are polygons.
inline InstanceKind kind_for_class(ElementClass c) {
  return c == ElementClass::pedestrian_crossing ? InstanceKind::polygon : InstanceKind::polyline;
}

struct ScoredInstance {
  Instance instance;
  double confidence = 0.0;
};

/// Predictions and ground truth of one scene.
struct SceneEval {
  std::vector<ScoredInstance> preds;
  std::vector<Instance> gts;
};

/// One prediction after matching: its confidence and whether it hit a GT.
struct RankedHit {
  double confidence;
  bool tp;
};

/// Area under the precision-recall curve. `hits` must be sorted by
/// confidence, descending. `area` integrates the monotone precision envelope
/// at every recall step; `points101` averages it over recall 0, 0.01, ..., 1.
inline double integrate_ap(std::span<const RankedHit> hits, std::size_t n_gt, ApIntegration mode) {
  if (n_gt == 0) throw Error("integrate_ap: no ground truth");
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    tp += hits[i].tp ? 1 : 0;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  for (std::size_t i = precision.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  if (mode == ApIntegration::points101) {
    double sum = 0.0;
    std::size_t k = 0;
    for (int r = 0; r <= 100; ++r) {
      const double level = r / 100.0;
      while (k < recall.size() && recall[k] < level) ++k;
      if (k < recall.size()) sum += precision[k];
    }
    return sum / 101.0;
  }
  double area = 0.0, prev = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    area += (recall[i] - prev) * precision[i];
    prev = recall[i];
  }
  return area;
}

/// Per-scene greedy matching of one class at one threshold. `dist(p, g)` is
/// the Chamfer distance between prediction p and GT g; `order` lists the
/// prediction indices by descending confidence. Returns tp flags by position
/// in `order`.
inline std::vector<bool> greedy_match(const std::vector<std::vector<double>>& dist, std::span<const std::size_t> order,
                                      std::size_t n_gt, double tau) {
  std::vector<bool> taken(n_gt, false), tp(order.size(), false);
  for (std::size_t r = 0; r < order.size(); ++r) {
    std::optional<std::size_t> best;
    for (std::size_t g = 0; g < n_gt; ++g) {
      const double d = dist[order[r]][g];
      if (taken[g] || d > tau) continue;
      if (!best || d < dist[order[r]][*best]) best = g;
    }
    if (best) {
      taken[*best] = true;
      tp[r] = true;
    }
  }
  return tp;
}

namespace detail {

/// Per-scene, per-class Chamfer tables shared by all thresholds.
struct ClassTables {
  std::vector<double> confidence;         // per prediction
  std::vector<std::vector<double>> dist;  // pred x gt
  std::size_t n_gt = 0;
};

inline ClassTables class_tables(const SceneEval& s, ElementClass c, const MetricConfig& cfg) {
  ClassTables t;
  std::vector<std::vector<Point2>> gts;
  for (const auto& g : s.gts) {
    if (g.cls == c) gts.push_back(densify(g.points, g.kind, cfg.chamfer_samples));
  }
  t.n_gt = gts.size();
  for (const auto& p : s.preds) {
    if (p.instance.cls != c) continue;
    t.confidence.push_back(p.confidence);
    const auto dp = densify(p.instance.points, p.instance.kind, cfg.chamfer_samples);
    std::vector<double> row;
    for (const auto& g : gts) row.push_back(chamfer(dp, g));
    t.dist.push_back(std::move(row));
  }
  return t;
}

inline std::vector<std::size_t> by_confidence(std::span<const double> conf) {
  std::vector<std::size_t> order(conf.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return conf[a] > conf[b]; });
  return order;
}

}  // namespace detail

/// AP at one threshold from per-scene tables of a single class.
inline std::optional<double> ap_from_tables(std::span<const detail::ClassTables> tables, double tau,
                                            ApIntegration mode) {
  std::vector<RankedHit> hits;
  std::size_t n_gt = 0;
  for (const auto& t : tables) {
    n_gt += t.n_gt;
    const auto order = detail::by_confidence(t.confidence);
    const auto tp = greedy_match(t.dist, order, t.n_gt, tau);
    for (std::size_t r = 0; r < order.size(); ++r) hits.push_back({t.confidence[order[r]], tp[r]});
  }
  if (n_gt == 0) return std::nullopt;
  std::stable_sort(hits.begin(), hits.end(),
                   [](const RankedHit& a, const RankedHit& b) { return a.confidence > b.confidence; });
  return integrate_ap(hits, n_gt, mode);
}

inline std::vector<detail::ClassTables> class_tables(std::span<const SceneEval> scenes, ElementClass c,
                                                     const MetricConfig& cfg) {
  std::vector<detail::ClassTables> out;
  for (const auto& s : scenes) out.push_back(detail::class_tables(s, c, cfg));
  return out;
}

/// AP of one class at one threshold, pooled over scenes. Absent (nullopt)
/// when the class has no ground truth anywhere.
inline std::optional<double> ap_at_tau(std::span<const SceneEval> scenes, ElementClass c, double tau,
                                       const MetricConfig& cfg = {}) {
  return ap_from_tables(class_tables(scenes, c, cfg), tau, cfg.integration);
}

// ------------------------------------------------------------------ TOPO

struct TopoScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Densified road graph: vertices every `step` meters along each instance,
/// with exactly coincident vertices merged.
struct TopoGraph {
  std::vector<Point2> vertices;
  std::vector<std::vector<std::pair<int, double>>> adjacent;
};

inline TopoGraph build_topo_graph(std::span<const Instance> instances, double step) {
  TopoGraph g;
  std::map<Point2, int> index;
  auto vertex = [&](Point2 p) {
    const auto [it, inserted] = index.emplace(p, static_cast<int>(g.vertices.size()));
    if (inserted) {
      g.vertices.push_back(p);
      g.adjacent.emplace_back();
    }
    return it->second;
  };
  auto link = [&](int a, int b) {
    if (a == b) return;
    for (const auto& [n, w] : g.adjacent[static_cast<std::size_t>(a)])
      if (n == b) return;
    const double w = distance(g.vertices[static_cast<std::size_t>(a)], g.vertices[static_cast<std::size_t>(b)]);
    g.adjacent[static_cast<std::size_t>(a)].emplace_back(b, w);
    g.adjacent[static_cast<std::size_t>(b)].emplace_back(a, w);
  };
  for (const auto& inst : instances) {
    std::vector<Point2> pts = inst.points;
    if (inst.kind == InstanceKind::polygon && !pts.empty() && pts.front() != pts.back()) pts.push_back(pts.front());
    if (pts.empty()) continue;
    int prev = vertex(pts[0]);
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const Point2 a = pts[i - 1], b = pts[i];
      const auto pieces = std::max<long>(1, static_cast<long>(std::ceil(distance(a, b) / step)));
      for (long k = 1; k <= pieces; ++k) {
        // Interpolate from the nearer end so a reversed segment yields the same points.
        Point2 p;
        if (k == pieces) {
          p = b;
        } else if (2 * k <= pieces) {
          p = a + (static_cast<double>(k) / static_cast<double>(pieces)) * (b - a);
        } else {
          p = b + (static_cast<double>(pieces - k) / static_cast<double>(pieces)) * (a - b);
        }
        const int cur = vertex(p);
        link(prev, cur);
        prev = cur;
      }
    }
  }
  return g;
}

namespace detail {

/// Bounded single-source shortest paths with a reusable distance buffer.
/// `get(v)` returns the vertices within geodesic distance `radius` of v,
/// sorted by id; each set is computed once.
class ReachableSets {
 public:
  ReachableSets(const TopoGraph& g, double radius)
      : g_(g),
        radius_(radius),
        sets_(g.vertices.size()),
        done_(g.vertices.size(), 0),
        dist_(g.vertices.size(), std::numeric_limits<double>::infinity()) {}

  const std::vector<int>& get(int seed) {
    const auto s = static_cast<std::size_t>(seed);
    if (done_[s]) return sets_[s];
    using Item = std::pair<double, int>;
    std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
    std::vector<int> touched{seed};
    auto& out = sets_[s];
    dist_[s] = 0.0;
    pq.emplace(0.0, seed);
    while (!pq.empty()) {
      const auto [d, v] = pq.top();
      pq.pop();
      if (d > dist_[static_cast<std::size_t>(v)]) continue;
      out.push_back(v);
      for (const auto& [n, w] : g_.adjacent[static_cast<std::size_t>(v)]) {
        const double nd = d + w;
        if (nd > radius_ + 1e-9) continue;
        double& cur = dist_[static_cast<std::size_t>(n)];
        if (cur <= nd) continue;
        if (cur == std::numeric_limits<double>::infinity()) touched.push_back(n);
        cur = nd;
        pq.emplace(nd, n);
      }
    }
    for (int t : touched) dist_[static_cast<std::size_t>(t)] = std::numeric_limits<double>::infinity();
    std::sort(out.begin(), out.end());
    done_[s] = 1;
    return out;
  }

 private:
  const TopoGraph& g_;
  double radius_;
  std::vector<std::vector<int>> sets_;
  std::vector<char> done_;
  std::vector<double> dist_;
};

/// Vertices within geodesic distance `radius` of `seed`, sorted by id.
inline std::vector<int> reachable(const TopoGraph& g, int seed, double radius) {
  return ReachableSets(g, radius).get(seed);
}

/// Greedy one-to-one vertex matching within `radius`, nearest pairs first.
/// Ties are broken by coordinates, then vertex id.
inline std::pair<std::vector<int>, std::vector<int>> match_vertices(const TopoGraph& a, const TopoGraph& b,
                                                                    double radius) {
  std::map<std::pair<long, long>, std::vector<int>> grid;
  auto cell = [&](Point2 p) {
    return std::pair<long, long>{static_cast<long>(std::floor(p.x / radius)), static_cast<long>(std::floor(p.y / radius))};
  };
  for (std::size_t j = 0; j < b.vertices.size(); ++j) grid[cell(b.vertices[j])].push_back(static_cast<int>(j));
  struct Cand {
    double d;
    int i, j;
  };
  std::vector<Cand> cands;
  for (std::size_t i = 0; i < a.vertices.size(); ++i) {
    const auto [cx, cy] = cell(a.vertices[i]);
    for (long dx = -1; dx <= 1; ++dx) {
      for (long dy = -1; dy <= 1; ++dy) {
        const auto it = grid.find({cx + dx, cy + dy});
        if (it == grid.end()) continue;
        for (int j : it->second) {
          const double d = distance(a.vertices[i], b.vertices[static_cast<std::size_t>(j)]);
          if (d <= radius) cands.push_back({d, static_cast<int>(i), j});
        }
      }
    }
  }
  std::sort(cands.begin(), cands.end(), [&](const Cand& x, const Cand& y) {
    if (x.d != y.d) return x.d < y.d;
    const auto& ax = a.vertices[static_cast<std::size_t>(x.i)];
    const auto& ay = a.vertices[static_cast<std::size_t>(y.i)];
    if (ax != ay) return ax < ay;
    const auto& bx = b.vertices[static_cast<std::size_t>(x.j)];
    const auto& by = b.vertices[static_cast<std::size_t>(y.j)];
    if (bx != by) return bx < by;
    return std::pair{x.i, x.j} < std::pair{y.i, y.j};
  });
  std::vector<int> a_to_b(a.vertices.size(), -1), b_to_a(b.vertices.size(), -1);
  for (const auto& c : cands) {
    if (a_to_b[static_cast<std::size_t>(c.i)] >= 0 || b_to_a[static_cast<std::size_t>(c.j)] >= 0) continue;
    a_to_b[static_cast<std::size_t>(c.i)] = c.j;
    b_to_a[static_cast<std::size_t>(c.j)] = c.i;
  }
  return {a_to_b, b_to_a};
}

/// Sum over the vertices of `a` of the fraction of each seed's reachable set
/// whose matches land in the partner's reachable set. Unmatched seeds add 0.
inline double seed_fraction_sum(ReachableSets& ra, ReachableSets& rb, const std::vector<int>& a_to_b,
                                std::size_t b_size) {
  double sum = 0.0;
  std::vector<char> in_rb(b_size, 0);
  for (std::size_t v = 0; v < a_to_b.size(); ++v) {
    const int partner = a_to_b[v];
    if (partner < 0) continue;
    const auto& sa = ra.get(static_cast<int>(v));
    const auto& sb = rb.get(partner);
    for (int x : sb) in_rb[static_cast<std::size_t>(x)] = 1;
    std::size_t hit = 0;
    for (int x : sa) {
      const int m = a_to_b[static_cast<std::size_t>(x)];
      if (m >= 0 && in_rb[static_cast<std::size_t>(m)]) ++hit;
    }
    for (int x : sb) in_rb[static_cast<std::size_t>(x)] = 0;
    sum += static_cast<double>(hit) / static_cast<double>(sa.size());
  }
  return sum;
}

}  // namespace detail

/// Running TOPO totals, so scenes can be pooled vertex by vertex.
struct TopoAccumulator {
  double precision_sum = 0.0;
  std::size_t pred_vertices = 0;
  double recall_sum = 0.0;
  std::size_t gt_vertices = 0;

  TopoScore score() const {
    TopoScore s;
    if (pred_vertices > 0) s.precision = precision_sum / static_cast<double>(pred_vertices);
    if (gt_vertices > 0) s.recall = recall_sum / static_cast<double>(gt_vertices);
    if (s.precision + s.recall > 0.0) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    return s;
  }
};

inline void topo_accumulate(std::span<const Instance> preds, std::span<const Instance> gts, const MetricConfig& cfg,
                            TopoAccumulator& acc) {
  const auto gp = build_topo_graph(preds, cfg.topo_step);
  const auto gg = build_topo_graph(gts, cfg.topo_step);
  acc.pred_vertices += gp.vertices.size();
  acc.gt_vertices += gg.vertices.size();
  if (gp.vertices.empty() || gg.vertices.empty()) return;
  const auto [p2g, g2p] = detail::match_vertices(gp, gg, cfg.match_radius);
  detail::ReachableSets rp(gp, cfg.propagation_radius);
  detail::ReachableSets rg(gg, cfg.propagation_radius);
  acc.precision_sum += detail::seed_fraction_sum(rp, rg, p2g, gg.vertices.size());
  acc.recall_sum += detail::seed_fraction_sum(rg, rp, g2p, gp.vertices.size());
}

/// TOPO precision/recall/F1 of one scene. Empty prediction or GT graphs
/// score 0 and add a diagnostic.
inline TopoScore topo_score(std::span<const Instance> preds, std::span<const Instance> gts, const MetricConfig& cfg = {},
                            std::vector<Diagnostic>* diags = nullptr) {
  if (preds.empty() || gts.empty()) {
    if (diags) diags->push_back({preds.empty() ? "TOPO: empty prediction graph" : "TOPO: empty ground-truth graph",
                                 std::nullopt, std::nullopt});
    return {};
  }
  TopoAccumulator acc;
  topo_accumulate(preds, gts, cfg, acc);
  return acc.score();
}

// ------------------------------------------------------------------ report

struct ClassAp {
  std::vector<double> at_tau;
  double ap = 0.0;
};

struct MetricsReport {
  std::vector<double> taus;
  std::map<ElementClass, ClassAp> per_class;  // classes present in GT only
  double map = 0.0;
  TopoScore topo;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    auto& pc = j["per_class"] = nlohmann::ordered_json::object();
    for (const auto& [cls, ap] : per_class) {
      auto& e = pc[std::string(to_string(cls))];
      for (std::size_t t = 0; t < taus.size(); ++t) {
        char key[32];
        std::snprintf(key, sizeof key, "AP@%.1f", taus[t]);
        e[key] = ap.at_tau[t];
      }
      e["AP"] = ap.ap;
    }
    j["mAP"] = map;
    j["TOPO"] = {{"precision", topo.precision}, {"recall", topo.recall}, {"f1", topo.f1}};
    return j;
  }
};

inline std::vector<Instance> topo_subset(std::span<const Instance> xs, const MetricConfig& cfg) {
  std::vector<Instance> out;
  for (const auto& x : xs) {
    if (!cfg.topo_centerline_only || x.cls == ElementClass::centerline) out.push_back(x);
  }
  return out;
}

/// AP per class averaged over the thresholds, mAP over classes present in
/// GT, and pooled TOPO over all scenes.
inline MetricsReport evaluate(std::span<const SceneEval> scenes, const MetricConfig& cfg = {}) {
  cfg.validate();
  MetricsReport r;
  r.taus = cfg.taus;
  double sum = 0.0;
  for (auto c : kAllClasses) {
    ClassAp ca;
    bool present = true;
    const auto tables = class_tables(scenes, c, cfg);
    for (double tau : cfg.taus) {
      const auto ap = ap_from_tables(tables, tau, cfg.integration);
      if (!ap) {
        present = false;
        break;
      }
      ca.at_tau.push_back(*ap);
    }
    if (!present) continue;
    for (double v : ca.at_tau) ca.ap += v;
    ca.ap /= static_cast<double>(ca.at_tau.size());
    sum += ca.ap;
    r.per_class[c] = ca;
  }
  if (!r.per_class.empty()) r.map = sum / static_cast<double>(r.per_class.size());

  TopoAccumulator acc;
  for (const auto& s : scenes) {
    std::vector<Instance> preds;
    for (const auto& p : s.preds) {
      if (p.confidence >= cfg.topo_min_confidence) preds.push_back(p.instance);
    }
    topo_accumulate(topo_subset(preds, cfg), topo_subset(s.gts, cfg), cfg, acc);
  }
  r.topo = acc.score();
  return r;
}

}  // namespace insight
