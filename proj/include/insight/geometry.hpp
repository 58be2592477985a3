#pragma once

// Vector-map graph, decomposition into intersection-free instances and
// arc-length resampling.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "insight/error.hpp"

namespace insight {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
  friend auto operator<=>(const Point2&, const Point2&) = default;
};

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }

inline double distance(Point2 a, Point2 b) {
  const double dx = a.x - b.x;
  const double dy = a.y - b.y;
  return std::sqrt(dx * dx + dy * dy);
}

/// Distance from `p` to the closed segment [a, b].
inline double segment_distance(Point2 p, Point2 a, Point2 b) {
  const Point2 ab = b - a;
  const double len2 = ab.x * ab.x + ab.y * ab.y;
  if (len2 == 0.0) return distance(p, a);
  double t = ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2;
  t = std::clamp(t, 0.0, 1.0);
  return distance(p, a + t * ab);
}

enum class ElementClass : std::uint8_t { pedestrian_crossing = 0, divider = 1, boundary = 2, centerline = 3 };
inline constexpr int kNumClasses = 4;
inline constexpr std::array<ElementClass, kNumClasses> kAllClasses = {
    ElementClass::pedestrian_crossing, ElementClass::divider, ElementClass::boundary, ElementClass::centerline};

inline std::string_view to_string(ElementClass c) {
  switch (c) {
    case ElementClass::pedestrian_crossing: return "pedestrian_crossing";
    case ElementClass::divider: return "divider";
    case ElementClass::boundary: return "boundary";
    case ElementClass::centerline: return "centerline";
  }
  return "?";
}

inline std::optional<ElementClass> class_from_string(std::string_view s) {
  for (auto c : kAllClasses) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

enum class InstanceKind : std::uint8_t { polyline, polygon };

inline std::string_view to_string(InstanceKind k) { return k == InstanceKind::polyline ? "polyline" : "polygon"; }

inline std::optional<InstanceKind> kind_from_string(std::string_view s) {
  if (s == "polyline") return InstanceKind::polyline;
  if (s == "polygon") return InstanceKind::polygon;
  return std::nullopt;
}

/// Undirected graph of a scene's road elements. Edge i joins
/// `edges[i].first` and `edges[i].second` and carries `edge_class[i]`.
struct VectorMapGraph {
  std::vector<Point2> vertices;
  std::vector<std::pair<int, int>> edges;
  std::vector<ElementClass> edge_class;

  friend bool operator==(const VectorMapGraph&, const VectorMapGraph&) = default;
};

/// One intersection-free shape. Polygons repeat their first point at the end.
struct Instance {
  std::vector<Point2> points;
  InstanceKind kind = InstanceKind::polyline;
  ElementClass cls = ElementClass::divider;

  friend bool operator==(const Instance&, const Instance&) = default;
};

/// An instance resampled to exactly n_p points. Polygon closure is implicit:
/// the last point is not a copy of the first.
struct SampledInstance {
  std::vector<Point2> points;
  InstanceKind kind = InstanceKind::polyline;
  ElementClass cls = ElementClass::divider;
};

struct Diagnostic {
  std::string message;
  std::optional<std::size_t> edge;
  std::optional<std::size_t> vertex;
};

// ------------------------------------------------------------------ validation

inline std::vector<Diagnostic> validate_graph(const VectorMapGraph& g) {
  std::vector<Diagnostic> out;
  const auto nv = static_cast<int>(g.vertices.size());
  if (g.edge_class.size() != g.edges.size()) {
    out.push_back({"edge_class has " + std::to_string(g.edge_class.size()) + " labels for " +
                       std::to_string(g.edges.size()) + " edges",
                   std::nullopt, std::nullopt});
  }
  std::map<std::pair<int, int>, std::size_t> seen;
  bool indices_ok = true;
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const auto [a, b] = g.edges[i];
    if (a < 0 || a >= nv || b < 0 || b >= nv) {
      out.push_back({"edge " + std::to_string(i) + " references missing vertex (" + std::to_string(a) + ", " +
                         std::to_string(b) + ")",
                     i, std::nullopt});
      indices_ok = false;
      continue;
    }
    if (a == b) {
      out.push_back({"self-loop at vertex " + std::to_string(a), i, static_cast<std::size_t>(a)});
      continue;
    }
    const auto key = std::minmax(a, b);
    const auto [it, inserted] = seen.emplace(std::pair{key.first, key.second}, i);
    if (!inserted) {
      out.push_back({"duplicate edge (" + std::to_string(a) + ", " + std::to_string(b) + ") repeats edge " +
                         std::to_string(it->second),
                     i, std::nullopt});
    }
  }
  if (!indices_ok || g.edge_class.size() != g.edges.size()) return out;

  // Class consistency per connected component (union-find over vertices).
  std::vector<int> parent(g.vertices.size());
  for (int i = 0; i < nv; ++i) parent[i] = i;
  auto find = [&](int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& [a, b] : g.edges) parent[find(a)] = find(b);
  std::map<int, std::pair<ElementClass, std::size_t>> component_class;
  for (std::size_t i = 0; i < g.edges.size(); ++i) {
    const int root = find(g.edges[i].first);
    const auto [it, inserted] = component_class.emplace(root, std::pair{g.edge_class[i], i});
    if (!inserted && it->second.first != g.edge_class[i]) {
      out.push_back({"edge " + std::to_string(i) + " has class " + std::string(to_string(g.edge_class[i])) +
                         " but its component is " + std::string(to_string(it->second.first)) + " (edge " +
                         std::to_string(it->second.second) + ")",
                     i, std::nullopt});
    }
  }
  return out;
}

// ------------------------------------------------------------------ canonical order

/// Twice the signed area of a closed ring given without the repeated point.
inline double signed_area2(std::span<const Point2> ring) {
  double a = 0.0;
  for (std::size_t i = 0; i < ring.size(); ++i) {
    const Point2 p = ring[i];
    const Point2 q = ring[(i + 1) % ring.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return a;
}

/// Puts an instance in canonical order. Polylines start from the
/// lexicographically smaller end. Polygons start at their smallest vertex and
/// run counter-clockwise.
inline Instance canonicalize(Instance inst) {
  auto& pts = inst.points;
  if (inst.kind == InstanceKind::polyline) {
    if (std::lexicographical_compare(pts.rbegin(), pts.rend(), pts.begin(), pts.end())) {
      std::reverse(pts.begin(), pts.end());
    }
    return inst;
  }
  std::vector<Point2> ring(pts.begin(), pts.end() - 1);
  const auto start = std::min_element(ring.begin(), ring.end()) - ring.begin();
  std::rotate(ring.begin(), ring.begin() + start, ring.end());
  const double area = signed_area2(ring);
  bool flip = area < 0.0;
  if (area == 0.0 && ring.size() > 2) flip = ring.back() < ring[1];
  if (flip) std::reverse(ring.begin() + 1, ring.end());
  ring.push_back(ring.front());
  pts = std::move(ring);
  return inst;
}

/// Strict weak order used to sort decomposition output deterministically.
inline bool instance_less(const Instance& a, const Instance& b) {
  if (a.cls != b.cls) return a.cls < b.cls;
  if (a.kind != b.kind) return a.kind < b.kind;
  return a.points < b.points;
}

// ------------------------------------------------------------------ decomposition

/// Splits the graph at every vertex of degree > 2. Each edge incident to such
/// a vertex keeps a private endpoint at the junction's coordinates, so the
/// arms still reach the junction. The remaining components are simple paths
/// (polylines) or simple cycles (polygons). Isolated vertices are dropped.
/// Output instances are canonicalized and sorted by (class, kind, points).
inline std::vector<Instance> decompose(const VectorMapGraph& g) {
  if (const auto diags = validate_graph(g); !diags.empty()) {
    throw Error("decompose: invalid graph: " + diags.front().message);
  }
  const std::size_t nv = g.vertices.size();
  std::vector<int> degree(nv, 0);
  for (const auto& [a, b] : g.edges) {
    ++degree[a];
    ++degree[b];
  }

  // Node ids: [0, nv) are original vertices; cut copies are appended.
  std::vector<Point2> node_pos(g.vertices);
  std::vector<std::vector<std::size_t>> incident(nv);  // node -> edge ids
  std::vector<std::array<std::size_t, 2>> edge_nodes(g.edges.size());
  auto endpoint = [&](int v) -> std::size_t {
    if (degree[v] <= 2) return static_cast<std::size_t>(v);
    node_pos.push_back(g.vertices[v]);
    incident.emplace_back();
    return node_pos.size() - 1;
  };
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    const auto a = endpoint(g.edges[e].first);
    const auto b = endpoint(g.edges[e].second);
    edge_nodes[e] = {a, b};
    incident[a].push_back(e);
    incident[b].push_back(e);
  }

  std::vector<bool> used(g.edges.size(), false);
  std::vector<Instance> out;

  auto walk = [&](std::size_t start_node, std::size_t first_edge) {
    Instance inst;
    inst.cls = g.edge_class[first_edge];
    inst.points.push_back(node_pos[start_node]);
    std::size_t node = start_node;
    std::size_t edge = first_edge;
    while (true) {
      used[edge] = true;
      const auto& en = edge_nodes[edge];
      node = en[0] == node ? en[1] : en[0];
      inst.points.push_back(node_pos[node]);
      std::optional<std::size_t> next;
      for (auto e : incident[node]) {
        if (!used[e]) next = e;
      }
      if (!next) break;
      edge = *next;
    }
    const bool closed = node == start_node;
    inst.kind = closed ? InstanceKind::polygon : InstanceKind::polyline;
    out.push_back(canonicalize(std::move(inst)));
  };

  // Paths first, starting from degree-1 nodes.
  for (std::size_t n = 0; n < node_pos.size(); ++n) {
    if (incident[n].size() == 1 && !used[incident[n][0]]) walk(n, incident[n][0]);
  }
  // Whatever is left lies on cycles.
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    if (!used[e]) walk(edge_nodes[e][0], e);
  }
  std::sort(out.begin(), out.end(), instance_less);
  return out;
}

// ------------------------------------------------------------------ arc length

inline double arc_length(std::span<const Point2> pts) {
  double len = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i) len += distance(pts[i - 1], pts[i]);
  return len;
}

/// Point at arc-length parameter `t` along the chain `pts`, whose cumulative
/// lengths are `cum` (cum[0] = 0).
inline Point2 point_at(std::span<const Point2> pts, std::span<const double> cum, double t) {
  const auto it = std::upper_bound(cum.begin(), cum.end(), t);
  auto seg = static_cast<std::size_t>(it - cum.begin());
  seg = seg == 0 ? 0 : seg - 1;
  // Skip zero-length segments and clamp onto the last segment.
  seg = std::min(seg, pts.size() - 2);
  while (seg + 1 < pts.size() - 1 && cum[seg + 1] - cum[seg] == 0.0) ++seg;
  const double seg_len = cum[seg + 1] - cum[seg];
  if (seg_len == 0.0) return pts[seg];
  const double alpha = std::clamp((t - cum[seg]) / seg_len, 0.0, 1.0);
  return pts[seg] + alpha * (pts[seg + 1] - pts[seg]);
}

/// Resamples an instance to `n_points` points evenly spaced in arc length.
/// Polylines keep both endpoints exactly; polygons start at points[0] and
/// leave the closing point implicit.
inline SampledInstance resample(const Instance& inst, int n_points) {
  if (n_points < 2) throw Error("resample: n_p must be >= 2, got " + std::to_string(n_points));
  if (inst.points.size() < 2) throw Error("resample: instance needs at least 2 points");
  const auto& pts = inst.points;
  std::vector<double> cum(pts.size(), 0.0);
  for (std::size_t i = 1; i < pts.size(); ++i) cum[i] = cum[i - 1] + distance(pts[i - 1], pts[i]);
  const double total = cum.back();
  if (!(total > 0.0)) throw Error("zero-length instance");

  SampledInstance s;
  s.kind = inst.kind;
  s.cls = inst.cls;
  s.points.reserve(static_cast<std::size_t>(n_points));
  const bool polyline = inst.kind == InstanceKind::polyline;
  const double step = total / static_cast<double>(polyline ? n_points - 1 : n_points);
  for (int k = 0; k < n_points; ++k) {
    if (k == 0) {
      s.points.push_back(pts.front());
    } else if (polyline && k == n_points - 1) {
      s.points.push_back(pts.back());
    } else {
      s.points.push_back(point_at(pts, cum, static_cast<double>(k) * step));
    }
  }
  return s;
}

/// Dense resampling used by evaluation: `n` points along the shape, polygons
/// sampled around the full loop (closing point implicit).
inline std::vector<Point2> densify(std::span<const Point2> pts, InstanceKind kind, int n) {
  Instance tmp;
  tmp.kind = kind;
  tmp.points.assign(pts.begin(), pts.end());
  if (kind == InstanceKind::polygon && tmp.points.front() != tmp.points.back()) {
    tmp.points.push_back(tmp.points.front());
  }
  if (arc_length(tmp.points) == 0.0) return {pts.begin(), pts.end()};
  return resample(tmp, n).points;
}

}  // namespace insight
