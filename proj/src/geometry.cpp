#include "aligndet/geometry.hpp"

#include <numbers>
#include <string>

namespace aligndet {

void NoiseConfig::validate() const {
  if (!(lambda >= 0)) throw ValidationError("noise.lambda must be >= 0");
  if (m_perturbed < 1) throw ValidationError("noise.m_perturbed must be >= 1");
  if (m_expanded < 0) throw ValidationError("noise.m_expanded must be >= 0");
  if (!(expansion_lo >= 1.0 && expansion_lo <= expansion_hi &&
        expansion_hi < std::numbers::sqrt2))
    throw ValidationError("noise.expansion range must lie in [1, sqrt(2))");
  if (max_rejection_resamples < 1)
    throw ValidationError("noise.max_rejection_resamples must be >= 1");
}

namespace {

Boxd perturb(const Boxd& gt, double lambda, Rng& rng) {
  const double hw = gt.width() / 2 * lambda;
  const double hh = gt.height() / 2 * lambda;
  const double dx1 = rng.normal();
  const double dy1 = rng.normal();
  const double dx2 = rng.normal();
  const double dy2 = rng.normal();
  return clamp_unit(Boxd{gt.x1 + hw * dx1, gt.y1 + hh * dy1, gt.x2 + hw * dx2,
                         gt.y2 + hh * dy2});
}

// Largest concentric scale that keeps the box inside the unit square.
double max_inside_scale(const Boxd& gt) {
  const auto c = to_center_form(gt);
  const double sx = std::min(c[0], 1.0 - c[0]) / (c[2] / 2);
  const double sy = std::min(c[1], 1.0 - c[1]) / (c[3] / 2);
  return std::max(1.0, std::min(sx, sy));
}

}  // namespace

Boxd expand_box(const Boxd& gt, double s) {
  const auto c = to_center_form(gt);
  return from_center_form<double>({c[0], c[1], c[2] * s, c[3] * s});
}

std::vector<NoisySample> generate_noisy_samples(const std::vector<GroundTruth>& gts,
                                                const NoiseConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<NoisySample> out;
  out.reserve(gts.size() * static_cast<std::size_t>(cfg.per_target()));
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const Boxd& gt = gts[i].box;
    if (!(gt.width() > 0 && gt.height() > 0))
      throw DomainError("ground-truth box " + std::to_string(i) + " has zero area");

    for (int j = 0; j < cfg.m_perturbed; ++j) {
      bool accepted = false;
      for (int attempt = 0; attempt <= cfg.max_rejection_resamples; ++attempt) {
        const Boxd b = perturb(gt, cfg.lambda, rng);
        const double q = iou(b, gt);
        if (q > 0.5) {
          out.push_back({b, static_cast<int>(i), gts[i].category_id, q, NoiseKind::perturbed});
          accepted = true;
          break;
        }
      }
      if (!accepted)
        throw RejectionExhausted("no perturbation of gt " + std::to_string(i) +
                                 " reached IoU > 0.5 within the resample cap");
    }

    const double cap = max_inside_scale(gt);
    for (int j = 0; j < cfg.m_expanded; ++j) {
      // s in (lo, hi]; capped so the enlarged box stays concentric and inside.
      double s = cfg.expansion_hi - (cfg.expansion_hi - cfg.expansion_lo) * rng.uniform();
      s = std::min(s, cap);
      const Boxd b = clamp_unit(expand_box(gt, s));
      out.push_back({b, static_cast<int>(i), gts[i].category_id, iou(b, gt),
                     NoiseKind::expanded});
    }
  }
  return out;
}

}  // namespace aligndet
