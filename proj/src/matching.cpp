#include "aligndet/matching.hpp"

#include <limits>
#include <string>

namespace aligndet {

CostMatrix build_cost_matrix(const Eigen::MatrixXd& query_scores,
                             const std::vector<Boxd>& query_boxes,
                             const std::vector<MatchTarget>& targets, const LossWeights& weights) {
  const auto nq = static_cast<Eigen::Index>(query_boxes.size());
  if (query_scores.rows() != nq) throw ShapeError("score rows differ from query count");
  CostMatrix cost(nq, static_cast<Eigen::Index>(targets.size()));
  for (Eigen::Index t = 0; t < cost.cols(); ++t) {
    const auto& tg = targets[static_cast<std::size_t>(t)];
    if (tg.prompt_index < 0 || tg.prompt_index >= query_scores.cols())
      throw ShapeError("target prompt index out of range");
    for (Eigen::Index q = 0; q < nq; ++q) {
      const auto bl = box_losses(query_boxes[static_cast<std::size_t>(q)], tg.box);
      cost(q, t) = -weights.w_cls * query_scores(q, tg.prompt_index) + weights.w_l1 * bl.l1 +
                   weights.w_giou * bl.giou_loss;
    }
  }
  return cost;
}

Assignment hungarian(const CostMatrix& cost) {
  const auto n_rows = static_cast<int>(cost.rows());  // queries
  const auto n_cols = static_cast<int>(cost.cols());  // targets
  if (n_cols > n_rows)
    throw ShapeError("more targets (" + std::to_string(n_cols) + ") than queries (" +
                     std::to_string(n_rows) + ")");
  if (!cost.allFinite()) throw DomainError("cost matrix has non-finite entries");

  // Targets play the role of "rows" in the classic formulation so that the
  // rectangular case (targets <= queries) is handled directly.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n_cols + 1, 0.0), v(n_rows + 1, 0.0);
  std::vector<int> owner(n_rows + 1, 0), way(n_rows + 1, 0);  // owner[j]: target on query j
  for (int i = 1; i <= n_cols; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(n_rows + 1, inf);
    std::vector<char> used(n_rows + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = owner[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n_rows; ++j) {
        if (used[j]) continue;
        const double cur = cost(j - 1, i0 - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n_rows; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment a;
  for (int j = 1; j <= n_rows; ++j) {
    if (owner[j] != 0)
      a.pairs.emplace_back(j - 1, owner[j] - 1);
    else
      a.unmatched_queries.push_back(j - 1);
  }
  return a;
}

std::vector<std::pair<int, int>> assign_auxiliary(const std::vector<NoisySample>& samples) {
  std::vector<std::pair<int, int>> out;
  out.reserve(samples.size());
  for (std::size_t k = 0; k < samples.size(); ++k)
    out.emplace_back(static_cast<int>(k), samples[k].gt_index);
  return out;
}

}  // namespace aligndet
