#include <gtest/gtest.h>

#include "aligndet/detector.hpp"
#include "aligndet/errors.hpp"
#include "aligndet/fusion.hpp"
#include "aligndet/scenes.hpp"

using namespace aligndet;

TEST(Fusion, FreshParametersAreAnExactIdentity) {
  ParameterStore s;
  fusion::add_parameters(s, 8, 16, 3);
  Rng rng(1);
  ad::Tape t(false);
  const ad::Matrix img = gaussian(10, 16, 1.0, rng);
  const ad::Var out = fusion::fuse(t, t.constant(img), t.constant(gaussian(4, 8, 1.0, rng)), s, 4);
  EXPECT_EQ(out.value(), img);
}

TEST(Fusion, IdentityStillPassesGradientToOutputProjection) {
  ParameterStore s;
  fusion::add_parameters(s, 8, 16, 3);
  Rng rng(1);
  ad::Tape t;
  const ad::Var out = fusion::fuse(t, t.constant(gaussian(10, 16, 1.0, rng)),
                                   t.constant(gaussian(4, 8, 1.0, rng)), s, 4);
  t.backward({{out, ad::Matrix::Ones(10, 16)}});
  ASSERT_NE(t.grad_of(s.at("fusion.attn.wo")), nullptr);
  EXPECT_GT(t.grad_of(s.at("fusion.attn.wo"))->norm(), 0.0);
  // wo = 0 blocks everything upstream of it
  EXPECT_EQ(t.grad_of(s.at("fusion.attn.wq"))->norm(), 0.0);
}

TEST(Fusion, SinglePromptAttendsToThatPromptOnly) {
  ParameterStore s;
  fusion::add_parameters(s, 8, 16, 3);
  Rng rng(2);
  s.at("fusion.attn.wo").value = gaussian(16, 16, 0.3, rng);
  const ad::Matrix img = gaussian(6, 16, 1.0, rng), text = gaussian(1, 8, 1.0, rng);
  ad::Tape t(false);
  const ad::Matrix out = fusion::fuse(t, t.constant(img), t.constant(text), s, 4).value();
  // softmax over one key is 1, so every row adds the same vector
  const ad::Matrix mapped = text * s.at("fusion.feat_map.w").value + s.at("fusion.feat_map.b").value;
  const ad::Matrix v = mapped * s.at("fusion.attn.wv").value + s.at("fusion.attn.bv").value;
  const ad::Matrix add = v * s.at("fusion.attn.wo").value + s.at("fusion.attn.bo").value;
  for (int i = 0; i < 6; ++i)
    EXPECT_LT((out.row(i) - img.row(i) - add).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, PromptOrderDoesNotMatter) {
  ParameterStore s;
  fusion::add_parameters(s, 8, 16, 3);
  Rng rng(4);
  s.at("fusion.attn.wo").value = gaussian(16, 16, 0.3, rng);
  const ad::Matrix img = gaussian(6, 16, 1.0, rng), text = gaussian(3, 8, 1.0, rng);
  ad::Matrix rev = text.colwise().reverse();
  ad::Tape t(false);
  const ad::Matrix a = fusion::fuse(t, t.constant(img), t.constant(text), s, 4).value();
  const ad::Matrix b = fusion::fuse(t, t.constant(img), t.constant(rev), s, 4).value();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fusion, StageTwoDetectorStartsIdenticalToStageOne) {
  ModelConfig c;
  c.hidden_dim = 32;
  c.ffn_dim = 64;
  c.num_object_queries = 8;
  Detector s1(c);
  Detector s2 = s1;
  s2.enable_fusion(9);
  ASSERT_TRUE(s2.fusion_enabled());
  ASSERT_FALSE(s1.fusion_enabled());
  const auto split = SplitSpec::default_split();
  const auto space = CategorySpace::default_space();
  const auto prompts = fixed_prompts(space, split.heldout_combos);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Scene sc = render_scene(split, SplitKind::heldout, seed);
    const auto a = s1.inference(sc.image, prompts.embeddings);
    const auto b = s2.inference(sc.image, prompts.embeddings);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].box, b[i].box);
      EXPECT_EQ(a[i].scores, b[i].scores);
    }
  }
}

TEST(Fusion, TextWidthMismatch) {
  ParameterStore s;
  fusion::add_parameters(s, 8, 16, 3);
  ad::Tape t(false);
  EXPECT_THROW(fusion::fuse(t, t.constant(ad::Matrix::Zero(4, 16)), t.constant(ad::Matrix::Zero(2, 5)), s, 4),
               ShapeError);
}
