#pragma once

// Object-query generation: naive, hierarchical and hybrid schemes, plus the
// embedding-sharing report used to tell them apart.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "insight/error.hpp"
#include "insight/numcore/tensor.hpp"
#include "insight/rng.hpp"

namespace insight {

enum class QueryScheme { naive, hierarchical, hybrid };

inline std::string_view to_string(QueryScheme s) {
  switch (s) {
    case QueryScheme::naive: return "naive";
    case QueryScheme::hierarchical: return "hierarchical";
    case QueryScheme::hybrid: return "hybrid";
  }
  return "?";
}

inline std::optional<QueryScheme> query_scheme_from_string(std::string_view s) {
  for (auto v : {QueryScheme::naive, QueryScheme::hierarchical, QueryScheme::hybrid}) {
    if (to_string(v) == s) return v;
  }
  return std::nullopt;
}

struct QueryConfig {
  int n_instances = 12;
  int n_points = 8;
  int dim = 64;

  int total() const { return n_instances * n_points; }

  void validate() const {
    if (n_instances < 1 || n_points < 2 || dim < 1) {
      throw Error("invalid query config: N_I=" + std::to_string(n_instances) + " n_p=" + std::to_string(n_points) +
                  " d=" + std::to_string(dim) + " (need N_I >= 1, n_p >= 2, d >= 1)");
    }
  }
};

enum class EmbeddingKind { instance, point };

struct EmbeddingRef {
  EmbeddingKind kind;
  int index;

  friend bool operator==(const EmbeddingRef&, const EmbeddingRef&) = default;
  friend auto operator<=>(const EmbeddingRef&, const EmbeddingRef&) = default;
};

/// Learnable tables. `instance` is empty (0 rows) for the naive scheme.
struct QueryTables {
  Tensor2 instance;
  Tensor2 point;
};

struct QuerySet {
  Tensor2 queries;
  std::vector<int> instance_of;
  std::vector<std::vector<EmbeddingRef>> provenance;
};

inline std::vector<int> instance_layout(const QueryConfig& cfg) {
  std::vector<int> out(static_cast<std::size_t>(cfg.total()));
  for (int j = 0; j < cfg.total(); ++j) out[static_cast<std::size_t>(j)] = j / cfg.n_points;
  return out;
}

inline Eigen::Index point_table_rows(QueryScheme s, const QueryConfig& cfg) {
  return s == QueryScheme::hierarchical ? cfg.n_points : cfg.total();
}

inline Eigen::Index instance_table_rows(QueryScheme s, const QueryConfig& cfg) {
  return s == QueryScheme::naive ? 0 : cfg.n_instances;
}

inline std::vector<std::vector<EmbeddingRef>> query_provenance(QueryScheme s, const QueryConfig& cfg) {
  std::vector<std::vector<EmbeddingRef>> out(static_cast<std::size_t>(cfg.total()));
  for (int j = 0; j < cfg.total(); ++j) {
    const int inst = j / cfg.n_points;
    auto& p = out[static_cast<std::size_t>(j)];
    switch (s) {
      case QueryScheme::naive: p = {{EmbeddingKind::point, j}}; break;
      case QueryScheme::hierarchical:
        p = {{EmbeddingKind::instance, inst}, {EmbeddingKind::point, j % cfg.n_points}};
        break;
      case QueryScheme::hybrid: p = {{EmbeddingKind::instance, inst}, {EmbeddingKind::point, j}}; break;
    }
  }
  return out;
}

inline QueryTables init_query_tables(QueryScheme s, const QueryConfig& cfg, Rng& rng) {
  cfg.validate();
  const double a = 1.0 / std::sqrt(static_cast<double>(cfg.dim));
  auto draw = [&](Eigen::Index rows) {
    Tensor2 t(rows, cfg.dim);
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-a, a);
    return t;
  };
  QueryTables t;
  t.instance = draw(instance_table_rows(s, cfg));
  t.point = draw(point_table_rows(s, cfg));
  return t;
}

/// Builds Q from the tables by summing each query's provenance rows.
inline QuerySet assemble_queries(QueryScheme s, const QueryConfig& cfg, const Tensor2& instance, const Tensor2& point) {
  cfg.validate();
  if (instance.rows() != instance_table_rows(s, cfg) || point.rows() != point_table_rows(s, cfg) ||
      point.cols() != cfg.dim || (instance.rows() > 0 && instance.cols() != cfg.dim)) {
    throw ShapeError("assemble_queries(" + std::string(to_string(s)) + "): instance table " + shape_str(instance) +
                     ", point table " + shape_str(point));
  }
  QuerySet qs;
  qs.instance_of = instance_layout(cfg);
  qs.provenance = query_provenance(s, cfg);
  qs.queries = Tensor2::Zero(cfg.total(), cfg.dim);
  for (int j = 0; j < cfg.total(); ++j) {
    for (const auto& ref : qs.provenance[static_cast<std::size_t>(j)]) {
      qs.queries.row(j) += ref.kind == EmbeddingKind::instance ? instance.row(ref.index) : point.row(ref.index);
    }
  }
  return qs;
}

inline QueryTables assemble_queries_backward(QueryScheme s, const QueryConfig& cfg, const Tensor2& dq) {
  QueryTables g;
  g.instance = Tensor2::Zero(instance_table_rows(s, cfg), cfg.dim);
  g.point = Tensor2::Zero(point_table_rows(s, cfg), cfg.dim);
  const auto prov = query_provenance(s, cfg);
  for (int j = 0; j < cfg.total(); ++j) {
    for (const auto& ref : prov[static_cast<std::size_t>(j)]) {
      (ref.kind == EmbeddingKind::instance ? g.instance : g.point).row(ref.index) += dq.row(j);
    }
  }
  return g;
}

struct GeneratedQueries {
  QuerySet set;
  QueryTables tables;
};

inline GeneratedQueries generate_queries(QueryScheme s, const QueryConfig& cfg, Rng& rng) {
  GeneratedQueries g;
  g.tables = init_query_tables(s, cfg, rng);
  g.set = assemble_queries(s, cfg, g.tables.instance, g.tables.point);
  return g;
}

inline GeneratedQueries gen_naive(const QueryConfig& cfg, Rng& rng) { return generate_queries(QueryScheme::naive, cfg, rng); }
inline GeneratedQueries gen_hierarchical(const QueryConfig& cfg, Rng& rng) {
  return generate_queries(QueryScheme::hierarchical, cfg, rng);
}
inline GeneratedQueries gen_hybrid(const QueryConfig& cfg, Rng& rng) { return generate_queries(QueryScheme::hybrid, cfg, rng); }

struct SharingReport {
  /// shared(a, b): queries a and b were built from at least one common embedding.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> shared;
  long intra_pairs = 0;
  long inter_pairs = 0;

  long total_pairs() const { return intra_pairs + inter_pairs; }
};

inline SharingReport sharing_signature(const QuerySet& qs) {
  const auto n = static_cast<Eigen::Index>(qs.provenance.size());
  if (qs.instance_of.size() != qs.provenance.size()) throw Error("sharing_signature: provenance not populated");
  SharingReport r;
  r.shared = decltype(r.shared)::Constant(n, n, false);
  for (Eigen::Index a = 0; a < n; ++a) {
    for (Eigen::Index b = a + 1; b < n; ++b) {
      bool common = false;
      for (const auto& x : qs.provenance[static_cast<std::size_t>(a)]) {
        for (const auto& y : qs.provenance[static_cast<std::size_t>(b)]) common = common || x == y;
      }
      if (!common) continue;
      r.shared(a, b) = r.shared(b, a) = true;
      if (qs.instance_of[static_cast<std::size_t>(a)] == qs.instance_of[static_cast<std::size_t>(b)]) {
        ++r.intra_pairs;
      } else {
        ++r.inter_pairs;
      }
    }
  }
  return r;
}

}  // namespace insight
