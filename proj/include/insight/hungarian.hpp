#pragma once

// Minimum-cost rectangular assignment (Hungarian method with potentials).

#include <limits>
#include <string>
#include <vector>

#include "insight/error.hpp"
#include "insight/numcore/tensor.hpp"

namespace insight {

struct Assignment {
  /// row_to_col[r] is the column assigned to row r.
  std::vector<int> row_to_col;
  /// col_to_row[c] is the row assigned to column c, or -1.
  std::vector<int> col_to_row;
  double total_cost = 0.0;
};

/// Assigns every row of an n x m cost matrix (n <= m) to a distinct column,
/// minimizing the summed cost. O(n^2 m).
inline Assignment hungarian(const Tensor2& cost) {
  const auto n = static_cast<int>(cost.rows());
  const auto m = static_cast<int>(cost.cols());
  if (n > m) {
    throw Error("hungarian: " + std::to_string(n) + " rows exceed " + std::to_string(m) + " columns");
  }
  if (!cost.allFinite()) throw Error("hungarian: cost matrix has non-finite entries");
  Assignment a;
  a.row_to_col.assign(static_cast<std::size_t>(n), -1);
  a.col_to_row.assign(static_cast<std::size_t>(m), -1);
  if (n == 0) return a;

  constexpr double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual source column.
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  for (int j = 1; j <= m; ++j) {
    if (p[j] == 0) continue;
    a.row_to_col[p[j] - 1] = j - 1;
    a.col_to_row[j - 1] = p[j] - 1;
  }
  for (int i = 0; i < n; ++i) a.total_cost += cost(i, a.row_to_col[i]);
  return a;
}

}  // namespace insight
