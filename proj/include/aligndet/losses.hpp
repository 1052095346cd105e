#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "aligndet/errors.hpp"
#include "aligndet/geometry.hpp"

namespace aligndet {

inline constexpr double kProbEps = 1e-7;

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

struct DwclParams {
  double beta1 = 1.0;
  double beta2 = 2.0;
  FocalParams focal_neg{};
};

struct LossWeights {
  double w_cls = 1.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
};

/// A scalar loss value with its derivative w.r.t. the predicted probability.
template <typename Scalar>
struct LossAndGrad {
  Scalar loss;
  Scalar dloss_dp;
};

template <typename Scalar>
Scalar clamp_probability(Scalar p) {
  return std::clamp(p, Scalar(kProbEps), Scalar(1 - kProbEps));
}

namespace detail {
template <typename Scalar>
void check_open_unit(Scalar p) {
  if (!(p > 0 && p < 1)) throw DomainError("probability outside (0,1)");
}
}  // namespace detail

/// -w (1-p)^g log p
template <typename Scalar>
LossAndGrad<Scalar> positive_focal(Scalar p, Scalar weight, Scalar gamma) {
  detail::check_open_unit(p);
  const Scalar q = 1 - p;
  const Scalar lp = std::log(p);
  const Scalar mod = std::pow(q, gamma);
  const Scalar loss = -weight * mod * lp;
  const Scalar dmod = gamma == 0 ? Scalar(0) : gamma * std::pow(q, gamma - 1);
  return {loss, weight * (dmod * lp - mod / p)};
}

/// -(1-a) p^g log(1-p)
template <typename Scalar>
LossAndGrad<Scalar> negative_focal(Scalar p, Scalar alpha, Scalar gamma) {
  detail::check_open_unit(p);
  const Scalar w = 1 - alpha;
  const Scalar lq = std::log1p(-p);
  const Scalar mod = std::pow(p, gamma);
  const Scalar loss = -w * mod * lq;
  const Scalar dmod = gamma == 0 ? Scalar(0) : gamma * std::pow(p, gamma - 1);
  return {loss, -w * (dmod * lq - mod / (1 - p))};
}

template <typename Scalar>
LossAndGrad<Scalar> focal_loss(Scalar p, int y, const FocalParams& fp) {
  if (y == 1) return positive_focal<Scalar>(p, fp.alpha, fp.gamma);
  return negative_focal<Scalar>(p, fp.alpha, fp.gamma);
}

struct DifficultyFactors {
  double alpha;
  double gamma;
};

/// Mean of (1 - IoU); throws DegenerateBatch when it is zero.
double mean_difficulty(std::span<const double> initial_ious);

/// Per-sample weighting and focusing factors. The weighting factors are
/// self-normalized by the batch mean difficulty unless `normalizer` is given.
std::vector<DifficultyFactors> dwcl_factors(std::span<const double> initial_ious,
                                            const DwclParams& params,
                                            std::optional<double> normalizer = {});

struct DwclBatch {
  std::vector<double> probs;
  std::vector<int> labels;
  std::vector<double> initial_ious;  ///< read only for positive entries
};

struct DwclResult {
  double total = 0;
  std::vector<double> per_sample;
  std::vector<double> dloss_dp;
};

/// Difficulty weighted classification loss. Positives draw their factors
/// from the batch's positive entries; negatives use the plain focal
/// negative branch. The difficulty priors are constants.
DwclResult dwcl_loss(const DwclBatch& batch, const DwclParams& params,
                     std::optional<double> normalizer = {});

struct BoxLossResult {
  double l1 = 0;
  double giou_loss = 0;
  std::array<double, 4> dl1{};    ///< d l1 / d(x1, y1, x2, y2) of pred
  std::array<double, 4> dgiou{};  ///< d giou_loss / d(x1, y1, x2, y2) of pred
};

/// L1 over center-form coordinates and 1 - GIoU, with gradients w.r.t. the
/// predicted corners.
BoxLossResult box_losses(const Boxd& pred, const Boxd& target);

/// Chain rule from corner gradients to (cx, cy, w, h) gradients.
inline std::array<double, 4> corner_grad_to_center(const std::array<double, 4>& g) {
  return {g[0] + g[2], g[1] + g[3], (g[2] - g[0]) / 2, (g[3] - g[1]) / 2};
}

struct LossTerms {
  double cls = 0;
  double l1 = 0;
  double giou = 0;

  LossTerms& operator+=(const LossTerms& o) {
    cls += o.cls;
    l1 += o.l1;
    giou += o.giou;
    return *this;
  }
};

inline double weighted(const LossTerms& t, const LossWeights& w) {
  return w.w_cls * t.cls + w.w_l1 * t.l1 + w.w_giou * t.giou;
}

/// Sum over supervised levels (encoder output plus every decoder layer) of
/// the weighted object-query and auxiliary-query terms.
double total_objective(std::span<const LossTerms> obj_terms, std::span<const LossTerms> aux_terms,
                       const LossWeights& weights);

struct CurvePoint {
  double p = 0;
  double iou = 0;
  double focal = 0;  ///< positive focal loss
  double dwcl = 0;   ///< positive DWCL loss at (p, iou)
};

/// Positive-sample focal and DWCL losses over `probs` x `ious`, DWCL
/// weighted against a fixed difficulty normalizer. Row order: iou-major.
std::vector<CurvePoint> loss_curves(std::span<const double> probs, std::span<const double> ious,
                                    const FocalParams& focal, const DwclParams& dwcl,
                                    double normalizer);

/// {k / n : k = 1 .. n - 1}
std::vector<double> open_unit_grid(int n);

}  // namespace aligndet
