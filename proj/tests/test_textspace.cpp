#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "aligndet/errors.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/textspace.hpp"

using namespace aligndet;

TEST(CategorySpace, UnitNormAndFrozen) {
  const auto space = CategorySpace::default_space();
  for (const auto& c : space.all_categories()) {
    EXPECT_NEAR(space.embed(c).norm(), 1.0, 1e-12);
    EXPECT_EQ(space.embed(c), space.embed(c));
  }
  EXPECT_EQ(space.all_categories().size(), 16u);
  EXPECT_EQ(CategorySpace::default_space().fingerprint(), space.fingerprint());
  EXPECT_NE(CategorySpace::default_space(8).fingerprint(), space.fingerprint());
}

TEST(CategorySpace, SharedAttributesAreCloser) {
  double shared = 0, disjoint = 0;
  int ns = 0, nd = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto space = CategorySpace::default_space(seed);
    const auto cats = space.all_categories();
    for (const auto& a : cats)
      for (const auto& b : cats) {
        if (a == b) continue;
        const double cos = space.embed(a).dot(space.embed(b));
        if (a.shape == b.shape) {
          shared += cos;
          ++ns;
        } else if (a.color != b.color) {
          disjoint += cos;
          ++nd;
        }
      }
  }
  EXPECT_GT(shared / ns, disjoint / nd);
}

TEST(CategorySpace, UnknownNames) {
  const auto space = CategorySpace::default_space();
  EXPECT_THROW(space.embed("hexagon", "red"), UnknownCategory);
  EXPECT_THROW(space.embed("circle", "purple"), UnknownCategory);
}

TEST(SamplePrompts, NoNegatives) {
  const auto space = CategorySpace::default_space();
  const auto split = SplitSpec::default_split();
  Rng rng(1);
  const std::vector<Category> gt{split.train_combos[0], split.train_combos[3], split.train_combos[0]};
  const auto p = sample_prompts(space, gt, split.train_combos, 0, rng);
  ASSERT_EQ(p.size(), 2);
  const std::set<Category> got(p.categories.begin(), p.categories.end());
  EXPECT_EQ(got, (std::set<Category>{gt[0], gt[1]}));
  for (bool m : p.positive_mask) EXPECT_TRUE(m);
}

TEST(SamplePrompts, Invariants) {
  const auto space = CategorySpace::default_space();
  const auto split = SplitSpec::default_split();
  Rng rng(2);
  for (int t = 0; t < 500; ++t) {
    const std::vector<Category> gt{split.train_combos[rng.below(12)], split.train_combos[rng.below(12)]};
    const auto p = sample_prompts(space, gt, split.train_combos, 5, rng);
    std::set<Category> seen;
    for (int i = 0; i < p.size(); ++i) {
      const auto& c = p.categories[static_cast<std::size_t>(i)];
      EXPECT_TRUE(seen.insert(c).second) << "duplicate prompt";
      const bool is_gt = std::find(gt.begin(), gt.end(), c) != gt.end();
      EXPECT_EQ(p.positive_mask[static_cast<std::size_t>(i)], is_gt);
      EXPECT_EQ(Eigen::VectorXd(p.embeddings.row(i).transpose()), space.embed(c));
    }
    for (const auto& g : gt) EXPECT_GE(p.index_of(g), 0);
  }
}

TEST(SamplePrompts, NegativesAreUniform) {
  const auto space = CategorySpace::default_space();
  const auto split = SplitSpec::default_split();
  Rng rng(3);
  const std::vector<Category> gt{split.train_combos[0]};
  std::map<Category, int> freq;
  const int draws = 10000, k = 4;
  for (int t = 0; t < draws; ++t) {
    const auto p = sample_prompts(space, gt, split.train_combos, k, rng);
    for (int i = 0; i < p.size(); ++i)
      if (!p.positive_mask[static_cast<std::size_t>(i)]) ++freq[p.categories[static_cast<std::size_t>(i)]];
  }
  const double q = static_cast<double>(k) / 11.0;  // 11 remaining categories
  const double mean = draws * q, sigma = std::sqrt(draws * q * (1 - q));
  EXPECT_EQ(freq.size(), 11u);
  for (const auto& [c, n] : freq) EXPECT_LT(std::abs(n - mean), 3 * sigma) << c.name();
}

TEST(SamplePrompts, InsufficientLabelSpace) {
  const auto space = CategorySpace::default_space();
  const auto split = SplitSpec::default_split();
  Rng rng(4);
  EXPECT_THROW(sample_prompts(space, {split.train_combos[0]}, split.train_combos, 12, rng),
               InsufficientLabelSpace);
}

TEST(SamplePrompts, DeterministicInSeed) {
  const auto space = CategorySpace::default_space();
  const auto split = SplitSpec::default_split();
  Rng a(5), b(5);
  const auto pa = sample_prompts(space, {split.train_combos[1]}, split.train_combos, 6, a);
  const auto pb = sample_prompts(space, {split.train_combos[1]}, split.train_combos, 6, b);
  EXPECT_EQ(pa.categories, pb.categories);
}
