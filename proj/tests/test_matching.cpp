#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "aligndet/errors.hpp"
#include "aligndet/matching.hpp"
#include "aligndet/rng.hpp"

using namespace aligndet;

namespace {

// Exhaustive minimum over injective maps target -> query.
double brute_force_min(const CostMatrix& c) {
  std::vector<int> q(static_cast<std::size_t>(c.rows()));
  std::iota(q.begin(), q.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0;
    for (Eigen::Index t = 0; t < c.cols(); ++t) s += c(q[static_cast<std::size_t>(t)], t);
    best = std::min(best, s);
  } while (std::next_permutation(q.begin(), q.end()));
  return best;
}

}  // namespace

TEST(Hungarian, HandCases) {
  CostMatrix one(1, 1);
  one << 5;
  const auto a = hungarian(one);
  ASSERT_EQ(a.pairs.size(), 1u);
  EXPECT_EQ(a.pairs[0], (std::pair{0, 0}));

  CostMatrix two(2, 2);
  two << 1, 2, 3, 0;
  const auto b = hungarian(two);
  EXPECT_EQ(b.pairs, (std::vector<std::pair<int, int>>{{0, 0}, {1, 1}}));
  EXPECT_EQ(b.total_cost(two), 1.0);
}

TEST(Hungarian, AgreesWithExhaustiveSearch) {
  Rng rng(99);
  int mismatches = 0;
  for (int n = 1; n <= 7; ++n) {
    for (int trial = 0; trial < 1000; ++trial) {
      const int cols = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
      CostMatrix c(n, cols);
      for (Eigen::Index i = 0; i < c.size(); ++i)
        c.data()[i] = trial % 4 == 0 ? static_cast<double>(rng.below(4)) : rng.uniform(-3, 5);
      const auto a = hungarian(c);
      if (std::abs(a.total_cost(c) - brute_force_min(c)) > 1e-9) ++mismatches;
      // one-to-one, every target matched
      std::vector<int> seen_q, seen_t;
      for (auto [qq, t] : a.pairs) {
        seen_q.push_back(qq);
        seen_t.push_back(t);
      }
      std::sort(seen_t.begin(), seen_t.end());
      EXPECT_EQ(std::adjacent_find(seen_q.begin(), seen_q.end()), seen_q.end());
      EXPECT_EQ(static_cast<int>(seen_t.size()), cols);
      EXPECT_EQ(a.pairs.size() + a.unmatched_queries.size(), static_cast<std::size_t>(n));
    }
  }
  EXPECT_EQ(mismatches, 0);
}

TEST(Hungarian, Errors) {
  EXPECT_THROW(hungarian(CostMatrix::Zero(2, 3)), ShapeError);
  CostMatrix bad = CostMatrix::Zero(2, 2);
  bad(0, 1) = std::nan("");
  EXPECT_THROW(hungarian(bad), DomainError);
}

TEST(Hungarian, DeterministicTieBreak) {
  const CostMatrix c = CostMatrix::Zero(4, 2);
  const auto a = hungarian(c), b = hungarian(c);
  EXPECT_EQ(a.pairs, b.pairs);
}

TEST(CostMatrix, HandValues) {
  const LossWeights w;
  Eigen::MatrixXd scores(1, 1);
  scores << 1.0;
  const Boxd g{0.1, 0.1, 0.4, 0.5};
  EXPECT_DOUBLE_EQ(build_cost_matrix(scores, {g}, {{g, 0}}, w)(0, 0), -1.0);

  const Boxd t{0.0, 0.0, 0.2, 0.2};
  const Boxd q{0.0, 0.0, 0.2, 0.4};
  scores << 0.5;
  const auto bl = box_losses(q, t);
  const double expect = -0.5 + 5 * bl.l1 + 2 * bl.giou_loss;
  EXPECT_NEAR(build_cost_matrix(scores, {q}, {{t, 0}}, w)(0, 0), expect, 1e-12);
}

TEST(CostMatrix, PermutingTargetsPermutesColumns) {
  Rng rng(4);
  Eigen::MatrixXd scores(5, 3);
  for (Eigen::Index i = 0; i < scores.size(); ++i) scores.data()[i] = rng.uniform();
  std::vector<Boxd> qb;
  for (int i = 0; i < 5; ++i) {
    const double x = rng.uniform(0, 0.5);
    qb.push_back({x, x, x + 0.3, x + 0.2});
  }
  std::vector<MatchTarget> t{{{0.1, 0.1, 0.3, 0.3}, 0}, {{0.5, 0.5, 0.9, 0.7}, 1}, {{0.2, 0.6, 0.4, 0.9}, 2}};
  std::vector<MatchTarget> r{t[2], t[0], t[1]};
  const auto a = build_cost_matrix(scores, qb, t, LossWeights{});
  const auto b = build_cost_matrix(scores, qb, r, LossWeights{});
  EXPECT_EQ(b.col(0), a.col(2));
  EXPECT_EQ(b.col(1), a.col(0));
  EXPECT_EQ(b.col(2), a.col(1));
}

TEST(AssignAuxiliary, OrderPreserving) {
  std::vector<NoisySample> s(5);
  for (int i = 0; i < 5; ++i) s[static_cast<std::size_t>(i)].gt_index = i < 3 ? 0 : 1;
  EXPECT_EQ(assign_auxiliary(s), (std::vector<std::pair<int, int>>{{0, 0}, {1, 0}, {2, 0}, {3, 1}, {4, 1}}));
  EXPECT_TRUE(assign_auxiliary({}).empty());
}
