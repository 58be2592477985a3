#include <algorithm>
#include <numeric>

#include <gtest/gtest.h>

#include "insight/hungarian.hpp"
#include "insight/rng.hpp"

using namespace insight;

namespace {

/// Minimum over all injective row -> column maps, by enumerating column permutations.
double brute_force_min(const Tensor2& c) {
  std::vector<int> cols(static_cast<std::size_t>(c.cols()));
  std::iota(cols.begin(), cols.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double t = 0.0;
    for (Eigen::Index r = 0; r < c.rows(); ++r) t += c(r, cols[static_cast<std::size_t>(r)]);
    best = std::min(best, t);
  } while (std::next_permutation(cols.begin(), cols.end()));
  return best;
}

}  // namespace

TEST(Hungarian, TwoByTwoExample) {
  Tensor2 c(2, 2);
  c << 1, 2, 2, 1;
  const auto a = hungarian(c);
  EXPECT_EQ(a.row_to_col, (std::vector<int>{0, 1}));
  EXPECT_DOUBLE_EQ(a.total_cost, 2.0);
}

TEST(Hungarian, OneRowPicksCheapestColumn) {
  Tensor2 c(1, 2);
  c << 0.2, 0.7;
  const auto a = hungarian(c);
  EXPECT_EQ(a.row_to_col[0], 0);
  EXPECT_EQ(a.col_to_row, (std::vector<int>{0, -1}));
}

TEST(Hungarian, ZeroRowsAssignsNothing) {
  const auto a = hungarian(Tensor2(0, 4));
  EXPECT_TRUE(a.row_to_col.empty());
  EXPECT_EQ(a.col_to_row, (std::vector<int>(4, -1)));
  EXPECT_EQ(a.total_cost, 0.0);
}

TEST(Hungarian, RejectsMoreRowsThanColumns) { EXPECT_THROW(hungarian(Tensor2::Zero(3, 2)), Error); }

TEST(Hungarian, MatchesBruteForceOnRandomMatrices) {
  Rng rng(2024);
  for (int trial = 0; trial < 500; ++trial) {
    const int n = rng.uniform_int(0, 6);
    const int m = rng.uniform_int(std::max(n, 1), 7);
    Tensor2 c(n, m);
    const bool integer = trial % 3 == 0;  // many ties
    for (Eigen::Index i = 0; i < c.size(); ++i) {
      c.data()[i] = integer ? static_cast<double>(rng.uniform_int(0, 3)) : rng.uniform(0, 10);
    }
    const auto a = hungarian(c);
    std::vector<int> seen = a.row_to_col;
    std::sort(seen.begin(), seen.end());
    EXPECT_EQ(std::adjacent_find(seen.begin(), seen.end()), seen.end());
    EXPECT_NEAR(a.total_cost, brute_force_min(c), 1e-9) << "trial " << trial;
  }
}
