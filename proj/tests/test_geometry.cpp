#include <gtest/gtest.h>

#include <cmath>

#include "aligndet/errors.hpp"
#include "aligndet/geometry.hpp"

using namespace aligndet;

namespace {

// Counts cells of an n x n grid whose centers fall inside each box.
double pixel_iou(const Boxd& a, const Boxd& b, int n) {
  auto span = [n](double lo, double hi) {
    const int first = static_cast<int>(std::ceil(lo * n - 0.5));
    const int last = static_cast<int>(std::ceil(hi * n - 0.5)) - 1;
    return std::pair{std::max(first, 0), std::min(last, n - 1)};
  };
  auto count = [](std::pair<int, int> s) { return std::max(0, s.second - s.first + 1); };
  const auto ax = span(a.x1, a.x2), ay = span(a.y1, a.y2), bx = span(b.x1, b.x2), by = span(b.y1, b.y2);
  const double ia = count(ax) * count(ay), ib = count(bx) * count(by);
  const std::pair ix{std::max(ax.first, bx.first), std::min(ax.second, bx.second)};
  const std::pair iy{std::max(ay.first, by.first), std::min(ay.second, by.second)};
  const double inter = count(ix) * count(iy);
  const double uni = ia + ib - inter;
  return uni > 0 ? inter / uni : 0.0;
}

Boxd random_box(Rng& rng) {
  const double x1 = rng.uniform(0, 0.9), y1 = rng.uniform(0, 0.9);
  return {x1, y1, rng.uniform(x1 + 0.02, 1.0), rng.uniform(y1 + 0.02, 1.0)};
}

// Corners on the 1/64 lattice of scene annotations, which the 512 grid
// resolves exactly.
Boxd lattice_box(Rng& rng) {
  auto at = [&](int lo, int hi) { return lo + static_cast<int>(rng.below(static_cast<std::uint64_t>(hi - lo + 1))); };
  const int x1 = at(0, 62), y1 = at(0, 62);
  return {x1 / 64.0, y1 / 64.0, at(x1 + 1, 64) / 64.0, at(y1 + 1, 64) / 64.0};
}

}  // namespace

TEST(Iou, HandValues) {
  EXPECT_DOUBLE_EQ(iou(Boxd{0, 0, 1, 1}, Boxd{0, 0, 1, 1}), 1.0);
  EXPECT_NEAR(iou(Boxd{0, 0, 0.2, 0.2}, Boxd{0.1, 0.1, 0.3, 0.3}), 1.0 / 7.0, 1e-12);
  EXPECT_EQ(iou(Boxd{0, 0, 0.1, 0.1}, Boxd{0.5, 0.5, 0.6, 0.6}), 0.0);
}

TEST(Iou, MatchesPixelGridCounting) {
  Rng rng(123);
  double worst = 0;
  for (int i = 0; i < 1000; ++i) {
    const Boxd a = lattice_box(rng);
    Boxd b = lattice_box(rng);
    if (i % 3 == 0) {  // force overlap for a third of the pairs
      b = a;
      b.x1 = std::max(0.0, b.x1 - static_cast<double>(rng.below(4)) / 64);
      b.y2 = std::min(1.0, b.y2 + static_cast<double>(rng.below(4)) / 64);
    }
    worst = std::max(worst, std::abs(iou(a, b) - pixel_iou(a, b, 512)));
  }
  EXPECT_LT(worst, 5e-3);
}

// Off the lattice the counting oracle itself is off by up to a cell per edge.
TEST(Iou, ContinuousBoxesWithinGridResolution) {
  Rng rng(124);
  for (int i = 0; i < 1000; ++i) {
    const Boxd a = random_box(rng), b = random_box(rng);
    const double side = std::min({a.width(), a.height(), b.width(), b.height()});
    EXPECT_LE(std::abs(iou(a, b) - pixel_iou(a, b, 512)), 2.0 / (512 * side));
  }
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(5);
  for (int i = 0; i < 500; ++i) {
    const Boxd a = random_box(rng), b = random_box(rng);
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    const double g = giou(a, b);
    EXPECT_LE(g, v + 1e-15);
    EXPECT_GE(g, -1.0);
  }
}

TEST(Giou, HandValues) {
  const Boxd b{0.1, 0.2, 0.4, 0.7};
  EXPECT_DOUBLE_EQ(giou(b, b), 1.0);
  EXPECT_NEAR(giou(Boxd{0, 0, 0.1, 0.1}, Boxd{0.2, 0, 0.3, 0.1}), -1.0 / 3.0, 1e-12);
  EXPECT_LT(giou(Boxd{0, 0, 0.01, 0.01}, Boxd{0.99, 0.99, 1, 1}), -0.999);
}

TEST(CenterForm, RoundTripAndHandValues) {
  const auto c = to_center_form(Boxd{0, 0, 1, 1});
  EXPECT_EQ(c, (CenterBox<double>{0.5, 0.5, 1, 1}));
  const Boxd b = from_center_form<double>({0.5, 0.5, 0.2, 0.4});
  EXPECT_NEAR(b.x1, 0.4, 1e-15);
  EXPECT_NEAR(b.y1, 0.3, 1e-15);
  EXPECT_NEAR(b.x2, 0.6, 1e-15);
  EXPECT_NEAR(b.y2, 0.7, 1e-15);
  Rng rng(9);
  for (int i = 0; i < 100; ++i) {
    const Boxd r = random_box(rng);
    const Boxd back = from_center_form(to_center_form(r));
    EXPECT_NEAR(back.x1, r.x1, 1e-15);
    EXPECT_NEAR(back.y2, r.y2, 1e-15);
  }
}

TEST(NoisySamples, ZeroLambdaReproducesGroundTruth) {
  NoiseConfig cfg;
  cfg.lambda = 0;
  cfg.m_expanded = 0;
  Rng rng(1);
  const std::vector<GroundTruth> gts{{{0.2, 0.3, 0.5, 0.6}, 4}};
  for (const auto& s : generate_noisy_samples(gts, cfg, rng)) {
    EXPECT_EQ(s.box, gts[0].box);
    EXPECT_EQ(s.initial_iou, 1.0);
    EXPECT_EQ(s.category_id, 4);
  }
}

TEST(NoisySamples, ConcentricExpansion) {
  const Boxd e = expand_box(Boxd{0.2, 0.2, 0.6, 0.6}, 1.25);
  EXPECT_NEAR(e.x1, 0.15, 1e-12);
  EXPECT_NEAR(e.y1, 0.15, 1e-12);
  EXPECT_NEAR(e.x2, 0.65, 1e-12);
  EXPECT_NEAR(e.y2, 0.65, 1e-12);
  EXPECT_NEAR(iou(e, Boxd{0.2, 0.2, 0.6, 0.6}), 1.0 / (1.25 * 1.25), 1e-12);
}

TEST(NoisySamples, QualityRuleHoldsOnTenThousandSamples) {
  NoiseConfig cfg;  // lambda 0.4
  Rng rng(77);
  int count = 0;
  double min_iou = 1;
  bool below_one = false;
  while (count < 10000) {
    std::vector<GroundTruth> gts;
    for (int k = 0; k < 3; ++k) gts.push_back({random_box(rng), k});
    for (const auto& s : generate_noisy_samples(gts, cfg, rng)) {
      ASSERT_GT(s.initial_iou, 0.5);
      EXPECT_DOUBLE_EQ(s.initial_iou, iou(s.box, gts[static_cast<std::size_t>(s.gt_index)].box));
      EXPECT_GE(s.box.x1, 0.0);
      EXPECT_LE(s.box.x2, 1.0);
      min_iou = std::min(min_iou, s.initial_iou);
      below_one = below_one || s.initial_iou < 1.0;
      ++count;
    }
  }
  EXPECT_TRUE(below_one);
  EXPECT_LT(min_iou, 0.7);  // the generator really explores hard positives
}

TEST(NoisySamples, LayoutPerGroundTruth) {
  NoiseConfig cfg;
  Rng rng(3);
  const std::vector<GroundTruth> gts{{{0.1, 0.1, 0.3, 0.4}, 0}, {{0.5, 0.5, 0.9, 0.8}, 1}};
  const auto s = generate_noisy_samples(gts, cfg, rng);
  ASSERT_EQ(s.size(), 2u * static_cast<std::size_t>(cfg.per_target()));
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto j = static_cast<int>(i) % cfg.per_target();
    EXPECT_EQ(s[i].gt_index, static_cast<int>(i) / cfg.per_target());
    EXPECT_EQ(s[i].kind, j < cfg.m_perturbed ? NoiseKind::perturbed : NoiseKind::expanded);
    if (s[i].kind == NoiseKind::expanded) {
      const auto c = to_center_form(s[i].box), g = to_center_form(gts[static_cast<std::size_t>(s[i].gt_index)].box);
      EXPECT_NEAR(c[0], g[0], 1e-12);
      EXPECT_NEAR(c[1], g[1], 1e-12);
      EXPECT_GE(c[2], g[2] - 1e-12);
    }
  }
}

TEST(NoisySamples, DeterministicInRng) {
  NoiseConfig cfg;
  const std::vector<GroundTruth> gts{{{0.1, 0.1, 0.3, 0.4}, 0}};
  Rng a(42), b(42);
  const auto sa = generate_noisy_samples(gts, cfg, a), sb = generate_noisy_samples(gts, cfg, b);
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(sa[i].box, sb[i].box);
}

TEST(NoisySamples, Errors) {
  NoiseConfig cfg;
  Rng rng(0);
  EXPECT_THROW(generate_noisy_samples({{{0.2, 0.2, 0.2, 0.5}, 0}}, cfg, rng), DomainError);
  NoiseConfig wild = cfg;
  wild.lambda = 50;
  wild.max_rejection_resamples = 1;
  EXPECT_THROW(generate_noisy_samples({{{0.4, 0.4, 0.45, 0.45}, 0}}, wild, rng), RejectionExhausted);
  NoiseConfig bad = cfg;
  bad.expansion_hi = 1.5;
  EXPECT_THROW(bad.validate(), ValidationError);
}
