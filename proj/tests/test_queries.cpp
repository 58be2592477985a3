#include <map>

#include <gtest/gtest.h>

#include "insight/queries.hpp"

using namespace insight;

namespace {

const QueryConfig kFig4{2, 3, 5};

/// Counts how often each embedding appears across all provenance lists.
std::map<EmbeddingRef, int> usage(const QuerySet& qs) {
  std::map<EmbeddingRef, int> u;
  for (const auto& p : qs.provenance)
    for (const auto& r : p) ++u[r];
  return u;
}

/// Number of query rows that change when one table row is perturbed.
int rows_changed(QueryScheme s, const QueryConfig& cfg, EmbeddingKind kind, int index) {
  Rng rng(7);
  const auto g = generate_queries(s, cfg, rng);
  QueryTables t = g.tables;
  (kind == EmbeddingKind::instance ? t.instance : t.point)(index, 0) += 1.0;
  const auto q2 = assemble_queries(s, cfg, t.instance, t.point);
  int changed = 0;
  for (Eigen::Index r = 0; r < q2.queries.rows(); ++r) changed += q2.queries.row(r) != g.set.queries.row(r);
  return changed;
}

}  // namespace

TEST(Queries, NaiveUsesOneDistinctEmbeddingPerQuery) {
  Rng rng(1);
  const auto g = gen_naive(kFig4, rng);
  EXPECT_EQ(g.set.queries.rows(), 6);
  const auto u = usage(g.set);
  EXPECT_EQ(u.size(), 6u);
  for (const auto& [ref, n] : u) {
    EXPECT_EQ(ref.kind, EmbeddingKind::point);
    EXPECT_EQ(n, 1);
  }
  EXPECT_EQ(g.tables.instance.rows(), 0);
  const auto rep = sharing_signature(g.set);
  EXPECT_EQ(rep.total_pairs(), 0);
  EXPECT_FALSE(rep.shared.any());
}

TEST(Queries, SeedChangesValuesNotStructure) {
  Rng a(1), b(2);
  const auto ga = gen_hybrid(kFig4, a);
  const auto gb = gen_hybrid(kFig4, b);
  EXPECT_NE(ga.set.queries, gb.set.queries);
  EXPECT_EQ(ga.set.provenance, gb.set.provenance);
  EXPECT_EQ(ga.set.instance_of, gb.set.instance_of);
}

TEST(Queries, HierarchicalIsPairwiseSum) {
  Rng rng(3);
  const auto g = gen_hierarchical(kFig4, rng);
  EXPECT_EQ(g.tables.instance.rows() + g.tables.point.rows(), 5);
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j)
      EXPECT_EQ(g.set.queries.row(i * 3 + j), g.tables.instance.row(i) + g.tables.point.row(j));
  const auto rep = sharing_signature(g.set);
  EXPECT_TRUE(rep.shared(0, 3));
  EXPECT_EQ(rep.inter_pairs, 3);
  EXPECT_EQ(rows_changed(QueryScheme::hierarchical, kFig4, EmbeddingKind::point, 1), 2);
}

TEST(Queries, HybridUsesEachPointEmbeddingOnce) {
  Rng rng(4);
  const auto g = gen_hybrid(kFig4, rng);
  EXPECT_EQ(g.tables.instance.rows() + g.tables.point.rows(), 8);
  for (const auto& [ref, n] : usage(g.set)) EXPECT_EQ(n, ref.kind == EmbeddingKind::point ? 1 : 3);
  for (int j = 0; j < 6; ++j) {
    EXPECT_EQ(rows_changed(QueryScheme::hybrid, kFig4, EmbeddingKind::point, j), 1);
    EXPECT_EQ(g.set.queries.row(j), g.tables.instance.row(j / 3) + g.tables.point.row(j));
  }
  Rng rng2(7);
  const auto base = gen_hybrid(kFig4, rng2);
  QueryTables t = base.tables;
  t.instance(0, 2) -= 0.5;
  const auto moved = assemble_queries(QueryScheme::hybrid, kFig4, t.instance, t.point);
  for (int j = 0; j < 6; ++j) EXPECT_EQ(moved.queries.row(j) != base.set.queries.row(j), j < 3) << j;
  const auto rep = sharing_signature(g.set);
  EXPECT_EQ(rep.intra_pairs, 6);
  EXPECT_EQ(rep.inter_pairs, 0);
}

TEST(Queries, SharingCountsMatchClosedFormOverConfigs) {
  for (int ni = 1; ni <= 5; ++ni) {
    for (int np = 2; np <= 6; ++np) {
      const QueryConfig cfg{ni, np, 3};
      Rng rng(static_cast<std::uint64_t>(ni * 10 + np));
      const auto hyb = sharing_signature(gen_hybrid(cfg, rng).set);
      EXPECT_EQ(hyb.intra_pairs, ni * np * (np - 1) / 2);
      EXPECT_EQ(hyb.inter_pairs, 0);
      const auto hier = sharing_signature(gen_hierarchical(cfg, rng).set);
      EXPECT_EQ(hier.inter_pairs, np * ni * (ni - 1) / 2);
      EXPECT_EQ(hier.intra_pairs, ni * np * (np - 1) / 2);
      EXPECT_EQ(sharing_signature(gen_naive(cfg, rng).set).total_pairs(), 0);
      for (auto s : {QueryScheme::naive, QueryScheme::hierarchical, QueryScheme::hybrid}) {
        const auto g = generate_queries(s, cfg, rng);
        EXPECT_EQ(g.set.queries.rows(), ni * np);
        for (int j = 0; j < ni * np; ++j) EXPECT_EQ(g.set.instance_of[static_cast<std::size_t>(j)], j / np);
      }
    }
  }
}

TEST(Queries, InitialisationScale) {
  Rng rng(9);
  const QueryConfig cfg{12, 8, 64};
  const auto g = gen_hybrid(cfg, rng);
  const double a = 1.0 / 8.0;
  EXPECT_LE(g.tables.point.cwiseAbs().maxCoeff(), a);
  EXPECT_LE(g.tables.instance.cwiseAbs().maxCoeff(), a);
}

TEST(Queries, BackwardIsAdjointOfAssembly) {
  Rng rng(10);
  const QueryConfig cfg{3, 4, 2};
  for (auto s : {QueryScheme::naive, QueryScheme::hierarchical, QueryScheme::hybrid}) {
    const auto g = generate_queries(s, cfg, rng);
    Tensor2 dq(cfg.total(), cfg.dim);
    for (Eigen::Index i = 0; i < dq.size(); ++i) dq.data()[i] = rng.uniform(-1, 1);
    const auto grads = assemble_queries_backward(s, cfg, dq);
    // <A(t), dq> == <t, A^T dq> for the linear assembly map A.
    const double lhs = (g.set.queries.array() * dq.array()).sum();
    double rhs = (g.tables.point.array() * grads.point.array()).sum();
    if (g.tables.instance.size() > 0) rhs += (g.tables.instance.array() * grads.instance.array()).sum();
    EXPECT_NEAR(lhs, rhs, 1e-12);
  }
}

TEST(Queries, InvalidConfigRejected) {
  Rng rng(1);
  EXPECT_THROW(gen_hybrid({0, 3, 4}, rng), Error);
  EXPECT_THROW(gen_hybrid({2, 1, 4}, rng), Error);
  EXPECT_THROW(assemble_queries(QueryScheme::hybrid, kFig4, Tensor2::Zero(2, 5), Tensor2::Zero(3, 5)), ShapeError);
}
