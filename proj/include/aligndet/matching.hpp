#pragma once

#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "aligndet/geometry.hpp"
#include "aligndet/losses.hpp"

namespace aligndet {

/// rows = queries, cols = targets.
using CostMatrix = Eigen::MatrixXd;

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  ///< (query, target), ascending query
  std::vector<int> unmatched_queries;

  double total_cost(const CostMatrix& cost) const {
    double s = 0;
    for (auto [q, t] : pairs) s += cost(q, t);
    return s;
  }
};

struct MatchTarget {
  Boxd box;
  int prompt_index = 0;  ///< column of the score matrix holding this target's category
};

/// cost(q, t) = -w_cls p(q, cat t) + w_l1 L1(q, t) + w_giou (1 - GIoU(q, t))
CostMatrix build_cost_matrix(const Eigen::MatrixXd& query_scores,
                             const std::vector<Boxd>& query_boxes,
                             const std::vector<MatchTarget>& targets, const LossWeights& weights);

/// Minimum-cost one-to-one assignment of every target to a distinct query
/// (Kuhn-Munkres with potentials, O(cols^2 rows)). Ties resolve to the lowest
/// query index encountered first. Throws ShapeError when cols > rows.
Assignment hungarian(const CostMatrix& cost);

/// Auxiliary query k is bound to noisy sample k, and so to its generator.
std::vector<std::pair<int, int>> assign_auxiliary(const std::vector<NoisySample>& samples);

}  // namespace aligndet
