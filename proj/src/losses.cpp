#include "aligndet/losses.hpp"

namespace aligndet {

double mean_difficulty(std::span<const double> initial_ious) {
  if (initial_ious.empty()) throw DegenerateBatch("no positive samples");
  double sum = 0;
  for (double v : initial_ious) {
    if (!(v >= 0 && v <= 1)) throw DomainError("initial IoU outside [0,1]");
    sum += 1 - v;
  }
  const double mean = sum / static_cast<double>(initial_ious.size());
  if (!(mean > 0)) throw DegenerateBatch("every initial IoU equals 1");
  return mean;
}

std::vector<DifficultyFactors> dwcl_factors(std::span<const double> initial_ious,
                                            const DwclParams& params,
                                            std::optional<double> normalizer) {
  const double norm = normalizer ? *normalizer : mean_difficulty(initial_ious);
  if (!(norm > 0)) throw DegenerateBatch("difficulty normalizer must be positive");
  std::vector<DifficultyFactors> out;
  out.reserve(initial_ious.size());
  for (double v : initial_ious) {
    const double d = 1 - v;
    out.push_back({d / norm, params.beta1 * d + params.beta2});
  }
  return out;
}

DwclResult dwcl_loss(const DwclBatch& batch, const DwclParams& params,
                     std::optional<double> normalizer) {
  const std::size_t n = batch.probs.size();
  if (batch.labels.size() != n || batch.initial_ious.size() != n)
    throw ShapeError("dwcl batch fields differ in length");

  std::vector<double> pos_ious;
  for (std::size_t i = 0; i < n; ++i)
    if (batch.labels[i] == 1) pos_ious.push_back(batch.initial_ious[i]);

  std::vector<DifficultyFactors> factors;
  if (!pos_ious.empty()) factors = dwcl_factors(pos_ious, params, normalizer);

  DwclResult r;
  r.per_sample.resize(n);
  r.dloss_dp.resize(n);
  std::size_t k = 0;
  for (std::size_t i = 0; i < n; ++i) {
    LossAndGrad<double> lg;
    if (batch.labels[i] == 1) {
      const auto& f = factors[k++];
      lg = positive_focal(batch.probs[i], f.alpha, f.gamma);
    } else {
      lg = negative_focal(batch.probs[i], params.focal_neg.alpha, params.focal_neg.gamma);
    }
    r.per_sample[i] = lg.loss;
    r.dloss_dp[i] = lg.dloss_dp;
    r.total += lg.loss;
  }
  return r;
}

namespace {
double sgn(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }
}  // namespace

BoxLossResult box_losses(const Boxd& pred, const Boxd& target) {
  BoxLossResult r;

  const auto pc = to_center_form(pred);
  const auto tc = to_center_form(target);
  std::array<double, 4> s{};
  for (int k = 0; k < 4; ++k) {
    r.l1 += std::abs(pc[k] - tc[k]);
    s[k] = sgn(pc[k] - tc[k]);
  }
  // cx = (x1 + x2) / 2, w = x2 - x1
  r.dl1 = {s[0] / 2 - s[2], s[1] / 2 - s[3], s[0] / 2 + s[2], s[1] / 2 + s[3]};

  const Boxd& a = pred;
  const Boxd& b = target;
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  const bool overlap = iw > 0 && ih > 0;
  const double inter = overlap ? iw * ih : 0.0;
  const double aw = a.width(), ah = a.height();
  const double uni = aw * ah + b.area() - inter;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double enc = cw * ch;
  if (!(uni > 0 && enc > 0)) {
    r.giou_loss = 1 - giou(pred, target);
    return r;
  }
  r.giou_loss = 1 - (inter / uni - (enc - uni) / enc);

  // d(area of pred) / d(x1, y1, x2, y2)
  const std::array<double, 4> d_area{-ah, -aw, ah, aw};
  std::array<double, 4> d_inter{};
  if (overlap) {
    d_inter[0] = a.x1 > b.x1 ? -ih : 0.0;
    d_inter[1] = a.y1 > b.y1 ? -iw : 0.0;
    d_inter[2] = a.x2 < b.x2 ? ih : 0.0;
    d_inter[3] = a.y2 < b.y2 ? iw : 0.0;
  }
  const std::array<double, 4> d_enc{a.x1 < b.x1 ? -ch : 0.0, a.y1 < b.y1 ? -cw : 0.0,
                                    a.x2 > b.x2 ? ch : 0.0, a.y2 > b.y2 ? cw : 0.0};
  for (int k = 0; k < 4; ++k) {
    const double d_uni = d_area[k] - d_inter[k];
    const double d_iou = (d_inter[k] * uni - inter * d_uni) / (uni * uni);
    const double d_ratio = (d_uni * enc - uni * d_enc[k]) / (enc * enc);  // d(U/C)
    r.dgiou[k] = -(d_iou + d_ratio);
  }
  return r;
}

double total_objective(std::span<const LossTerms> obj_terms, std::span<const LossTerms> aux_terms,
                       const LossWeights& weights) {
  double total = 0;
  for (const auto& t : obj_terms) total += weighted(t, weights);
  for (const auto& t : aux_terms) total += weighted(t, weights);
  return total;
}

std::vector<CurvePoint> loss_curves(std::span<const double> probs, std::span<const double> ious,
                                    const FocalParams& focal, const DwclParams& dwcl,
                                    double normalizer) {
  std::vector<CurvePoint> out;
  for (double v : ious) {
    const double one[] = {v};
    const DifficultyFactors f = dwcl_factors(one, dwcl, normalizer).front();
    for (double p : probs)
      out.push_back({p, v, positive_focal(p, focal.alpha, focal.gamma).loss,
                     positive_focal(p, f.alpha, f.gamma).loss});
  }
  return out;
}

std::vector<double> open_unit_grid(int n) {
  if (n < 2) throw DomainError("grid needs at least two intervals");
  std::vector<double> g;
  for (int k = 1; k < n; ++k) g.push_back(static_cast<double>(k) / n);
  return g;
}

}  // namespace aligndet
