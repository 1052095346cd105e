#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "aligndet/errors.hpp"
#include "aligndet/rng.hpp"

namespace aligndet {

/// Normalized axis-aligned box in corner form.
template <typename Scalar>
struct Box {
  Scalar x1{0}, y1{0}, x2{0}, y2{0};

  Scalar width() const { return x2 - x1; }
  Scalar height() const { return y2 - y1; }
  Scalar area() const {
    return std::max(Scalar(0), width()) * std::max(Scalar(0), height());
  }
  bool operator==(const Box&) const = default;
};

using Boxd = Box<double>;

/// (cx, cy, w, h)
template <typename Scalar>
using CenterBox = std::array<Scalar, 4>;

template <typename Scalar>
CenterBox<Scalar> to_center_form(const Box<Scalar>& b) {
  return {(b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2, b.x2 - b.x1, b.y2 - b.y1};
}

template <typename Scalar>
Box<Scalar> from_center_form(const CenterBox<Scalar>& c) {
  return {c[0] - c[2] / 2, c[1] - c[3] / 2, c[0] + c[2] / 2, c[1] + c[3] / 2};
}

template <typename Scalar>
Box<Scalar> clamp_unit(Box<Scalar> b) {
  auto c = [](Scalar v) { return std::clamp(v, Scalar(0), Scalar(1)); };
  return {c(b.x1), c(b.y1), c(b.x2), c(b.y2)};
}

template <typename Scalar>
Scalar intersection_area(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const Scalar ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return Scalar(0);
  return iw * ih;
}

/// Intersection over union; 0 when the union has zero area.
template <typename Scalar>
Scalar iou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  if (uni <= 0) return Scalar(0);
  return inter / uni;
}

/// Generalized IoU: IoU - (enclosure - union) / enclosure.
template <typename Scalar>
Scalar giou(const Box<Scalar>& a, const Box<Scalar>& b) {
  const Scalar inter = intersection_area(a, b);
  const Scalar uni = a.area() + b.area() - inter;
  const Scalar enc = (std::max(a.x2, b.x2) - std::min(a.x1, b.x1)) *
                     (std::max(a.y2, b.y2) - std::min(a.y1, b.y1));
  const Scalar i = uni > 0 ? inter / uni : Scalar(0);
  if (enc <= 0) return i;
  return i - (enc - uni) / enc;
}

// ---------------------------------------------------------------------------
// Noisy positive samples

enum class NoiseKind : std::uint8_t { perturbed, expanded };

struct NoisySample {
  Boxd box;
  int gt_index = 0;
  int category_id = 0;
  double initial_iou = 1.0;  ///< fixed difficulty prior, IoU with the generator
  NoiseKind kind = NoiseKind::perturbed;
};

struct NoiseConfig {
  double lambda = 0.4;
  int m_perturbed = 6;
  int m_expanded = 2;  ///< ceil(m_perturbed / 3), on top of m_perturbed
  double expansion_lo = 1.0;
  double expansion_hi = 1.4;  ///< must stay below sqrt(2)
  int max_rejection_resamples = 100;
  std::uint64_t seed = 0;

  int per_target() const { return m_perturbed + m_expanded; }
  void validate() const;
};

struct GroundTruth {
  Boxd box;
  int category_id = 0;
};

/// Concentric enlargement by `s` in both width and height.
Boxd expand_box(const Boxd& gt, double s);

/// Emits, per ground truth and in order, `m_perturbed` corner-jittered boxes
/// followed by `m_expanded` concentric enlargements. Every sample has
/// IoU > 0.5 with its generator.
std::vector<NoisySample> generate_noisy_samples(const std::vector<GroundTruth>& gts,
                                                const NoiseConfig& cfg, Rng& rng);

}  // namespace aligndet
