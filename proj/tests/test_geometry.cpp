#include <algorithm>
#include <map>
#include <set>

#include <gtest/gtest.h>

#include "insight/geometry.hpp"
#include "insight/rng.hpp"
#include "support/oracles.hpp"

using namespace insight;
using namespace insight::oracle;

namespace {

VectorMapGraph path_graph(std::vector<Point2> pts, ElementClass c = ElementClass::divider) {
  VectorMapGraph g;
  g.vertices = std::move(pts);
  for (int i = 1; i < static_cast<int>(g.vertices.size()); ++i) {
    g.edges.emplace_back(i - 1, i);
    g.edge_class.push_back(c);
  }
  return g;
}

std::multiset<std::pair<Point2, Point2>> segment_multiset(const VectorMapGraph& g) {
  std::multiset<std::pair<Point2, Point2>> s;
  for (auto [a, b] : g.edges) s.insert(std::minmax(g.vertices[a], g.vertices[b]));
  return s;
}

std::multiset<std::pair<Point2, Point2>> segment_multiset(const std::vector<Instance>& insts) {
  std::multiset<std::pair<Point2, Point2>> s;
  for (const auto& i : insts) {
    for (std::size_t k = 1; k < i.points.size(); ++k) s.insert(std::minmax(i.points[k - 1], i.points[k]));
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------- validate_graph

TEST(ValidateGraph, EmptyGraphIsValid) { EXPECT_TRUE(validate_graph({}).empty()); }

TEST(ValidateGraph, SelfLoopIsReported) {
  VectorMapGraph g;
  g.vertices.assign(4, Point2{});
  g.edges = {{3, 3}};
  g.edge_class = {ElementClass::divider};
  const auto d = validate_graph(g);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NE(d[0].message.find("self-loop at vertex 3"), std::string::npos);
  EXPECT_EQ(d[0].vertex, 3u);
}

TEST(ValidateGraph, DuplicateUnorderedEdgeIsReported) {
  VectorMapGraph g;
  g.vertices = {{0, 0}, {1, 0}, {2, 0}};
  g.edges = {{1, 2}, {2, 1}};
  g.edge_class = {ElementClass::divider, ElementClass::divider};
  const auto d = validate_graph(g);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NE(d[0].message.find("duplicate edge"), std::string::npos);
  EXPECT_EQ(d[0].edge, 1u);
}

TEST(ValidateGraph, BadIndexAndMixedClassComponent) {
  VectorMapGraph g;
  g.vertices = {{0, 0}, {1, 0}, {2, 0}};
  g.edges = {{0, 5}};
  g.edge_class = {ElementClass::divider};
  EXPECT_EQ(validate_graph(g).size(), 1u);

  g.edges = {{0, 1}, {1, 2}};
  g.edge_class = {ElementClass::divider, ElementClass::boundary};
  const auto d = validate_graph(g);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_NE(d[0].message.find("component"), std::string::npos);
}

// ---------------------------------------------------------------- decompose

TEST(Decompose, StraightPathIsOnePolyline) {
  const auto g = path_graph({{0, 0}, {1, 0}, {2, 0}});
  const auto out = decompose(g);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].kind, InstanceKind::polyline);
  EXPECT_EQ(out[0].points, (std::vector<Point2>{{0, 0}, {1, 0}, {2, 0}}));
}

TEST(Decompose, TJunctionGivesThreeArmsEndingAtJunction) {
  VectorMapGraph g;
  // Junction at (0,0) with arms to the west (2 segments), east and north.
  g.vertices = {{0, 0}, {-1, 0}, {-2, 0}, {1, 0}, {0, 1}};
  g.edges = {{0, 1}, {1, 2}, {0, 3}, {0, 4}};
  g.edge_class.assign(4, ElementClass::centerline);
  const auto out = decompose(g);
  ASSERT_EQ(out.size(), 3u);
  // Hand enumeration of the components after cutting at the junction.
  const std::vector<std::vector<Point2>> expected = {
      {{-2, 0}, {-1, 0}, {0, 0}},
      {{0, 0}, {0, 1}},
      {{0, 0}, {1, 0}},
  };
  std::vector<std::vector<Point2>> got;
  for (const auto& i : out) {
    EXPECT_EQ(i.kind, InstanceKind::polyline);
    EXPECT_TRUE(i.points.front() == Point2(0, 0) || i.points.back() == Point2(0, 0));
    got.push_back(i.points);
  }
  std::sort(got.begin(), got.end());
  EXPECT_EQ(got, expected);
}

TEST(Decompose, SquareCycleIsClosedPolygon) {
  VectorMapGraph g;
  g.vertices = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  g.edges = {{0, 1}, {1, 2}, {2, 3}, {3, 0}};
  g.edge_class.assign(4, ElementClass::pedestrian_crossing);
  const auto out = decompose(g);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].kind, InstanceKind::polygon);
  ASSERT_EQ(out[0].points.size(), 5u);
  EXPECT_EQ(out[0].points.front(), out[0].points.back());
  // Canonical: smallest vertex first, counter-clockwise.
  EXPECT_EQ(out[0].points, (std::vector<Point2>{{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}}));
}

TEST(Decompose, EmptyAndIsolatedVertices) {
  EXPECT_TRUE(decompose({}).empty());
  VectorMapGraph g;
  g.vertices = {{0, 0}, {5, 5}};
  EXPECT_TRUE(decompose(g).empty());
}

TEST(Decompose, RejectsInvalidGraph) {
  VectorMapGraph g;
  g.vertices = {{0, 0}};
  g.edges = {{0, 0}};
  g.edge_class = {ElementClass::divider};
  EXPECT_THROW(decompose(g), Error);
}

TEST(Decompose, PolylineOrientationStartsAtSmallerEnd) {
  const auto out = decompose(path_graph({{3, 0}, {2, 1}, {1, 0}}));
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out[0].points.front(), Point2(1, 0));
}

TEST(Decompose, MatchesBruteForceOracleAndConservesEdges) {
  for (int trial = 0; trial < 1000; ++trial) {
    Rng rng(child_seed(2024, trial));
    const auto g = random_graph(rng, 40);
    ASSERT_TRUE(validate_graph(g).empty());
    const auto out = decompose(g);
    ASSERT_EQ(as_oracle(out), oracle_decompose(g)) << "trial " << trial;
    ASSERT_EQ(segment_multiset(out), segment_multiset(g)) << "trial " << trial;
    for (const auto& inst : out) {
      // Degree bound: no interior vertex repeats, so every vertex has degree <= 2.
      std::set<Point2> interior(inst.points.begin() + 1, inst.points.end() - 1);
      ASSERT_EQ(interior.size(), inst.points.size() - 2);
    }
  }
}

// ---------------------------------------------------------------- resample / arc_length

TEST(ArcLength, Examples) {
  const std::vector<Point2> a = {{0, 0}, {3, 4}};
  EXPECT_DOUBLE_EQ(arc_length(a), 5.0);
  const std::vector<Point2> b = {{0, 0}, {1, 0}, {1, 1}};
  EXPECT_DOUBLE_EQ(arc_length(b), 2.0);
  const std::vector<Point2> c = {{2, 2}, {2, 2}};
  EXPECT_EQ(arc_length(c), 0.0);
}

TEST(Resample, EvenSpacingOnSegment) {
  const Instance inst{{{0, 0}, {3, 0}}, InstanceKind::polyline, ElementClass::divider};
  const auto s = resample(inst, 4);
  ASSERT_EQ(s.points.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(s.points[k].x, k, 1e-12);
    EXPECT_EQ(s.points[k].y, 0.0);
  }
}

TEST(Resample, TwoPointsIsIdentity) {
  const Instance inst{{{0, 0}, {1, 0}}, InstanceKind::polyline, ElementClass::divider};
  EXPECT_EQ(resample(inst, 2).points, inst.points);
}

TEST(Resample, UnitSquarePolygonGivesCorners) {
  const Instance sq{{{0, 0}, {1, 0}, {1, 1}, {0, 1}, {0, 0}}, InstanceKind::polygon, ElementClass::pedestrian_crossing};
  const auto s = resample(sq, 4);
  const std::vector<Point2> corners = {{0, 0}, {1, 0}, {1, 1}, {0, 1}};
  ASSERT_EQ(s.points.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_NEAR(s.points[k].x, corners[k].x, 1e-12);
    EXPECT_NEAR(s.points[k].y, corners[k].y, 1e-12);
  }
}

TEST(Resample, Errors) {
  const Instance zero{{{1, 1}, {1, 1}}, InstanceKind::polyline, ElementClass::divider};
  EXPECT_THROW(
      {
        try {
          resample(zero, 4);
        } catch (const Error& e) {
          EXPECT_STREQ(e.what(), "zero-length instance");
          throw;
        }
      },
      Error);
  const Instance ok{{{0, 0}, {1, 0}}, InstanceKind::polyline, ElementClass::divider};
  EXPECT_THROW(resample(ok, 1), Error);
}

TEST(Resample, PropertiesOnRandomPolylines) {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Instance inst;
    const int n = rng.uniform_int(2, 9);
    for (int i = 0; i < n; ++i) inst.points.push_back({rng.uniform(-10, 10), rng.uniform(-10, 10)});
    const int np = rng.uniform_int(2, 12);
    const auto s = resample(inst, np);
    // Endpoints exact.
    EXPECT_EQ(s.points.front(), inst.points.front());
    EXPECT_EQ(s.points.back(), inst.points.back());
    // Sample parameters are evenly spaced: the arc length up to sample k is k L/(np-1).
    const double total = arc_length(inst.points);
    std::vector<double> cum = {0.0};
    for (std::size_t i = 1; i < inst.points.size(); ++i) cum.push_back(cum.back() + distance(inst.points[i - 1], inst.points[i]));
    for (int k = 0; k < np; ++k) {
      // Locate sample k on the source chain and measure its parameter.
      double best = 1e300, param = 0;
      for (std::size_t i = 1; i < inst.points.size(); ++i) {
        const double d = segment_distance(s.points[k], inst.points[i - 1], inst.points[i]);
        if (d < best) {
          best = d;
          param = cum[i - 1] + distance(inst.points[i - 1], s.points[k]);
        }
      }
      const double expected = total * k / (np - 1);
      // The nearest segment may be ambiguous at crossings; only check samples that sit on their chain.
      if (best < 1e-9 && std::abs(param - expected) > 1e-9 * std::max(1.0, total)) {
        // A crossing segment can also contain the point; accept if any segment yields the expected parameter.
        bool found = false;
        for (std::size_t i = 1; i < inst.points.size(); ++i) {
          if (segment_distance(s.points[k], inst.points[i - 1], inst.points[i]) < 1e-9 &&
              std::abs(cum[i - 1] + distance(inst.points[i - 1], s.points[k]) - expected) <= 1e-9 * std::max(1.0, total)) {
            found = true;
          }
        }
        EXPECT_TRUE(found) << "trial " << trial << " sample " << k;
      }
    }
    // Idempotence: a polyline whose segments already have equal length.
    Instance even;
    even.points.push_back({rng.uniform(-5, 5), rng.uniform(-5, 5)});
    const double step = rng.uniform(0.1, 3.0);
    for (int k = 1; k < np; ++k) {
      const double a = rng.uniform(-1, 1), b = rng.uniform(-1, 1);
      const double norm = std::sqrt(a * a + b * b) + 1e-3;
      even.points.push_back(even.points.back() + Point2{step * a / norm, step * b / norm});
    }
    const double seg0 = distance(even.points[0], even.points[1]);
    for (int k = 2; k < np; ++k) even.points[k] = even.points[k - 1] + (seg0 / distance(even.points[k - 1], even.points[k])) * (even.points[k] - even.points[k - 1]);
    const auto s2 = resample(even, np);
    for (int k = 0; k < np; ++k) {
      EXPECT_NEAR(s2.points[k].x, even.points[k].x, 1e-9);
      EXPECT_NEAR(s2.points[k].y, even.points[k].y, 1e-9);
    }
  }
}
