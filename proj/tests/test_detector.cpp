#include <gtest/gtest.h>

#include "aligndet/detector.hpp"
#include "aligndet/errors.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/textspace.hpp"

using namespace aligndet;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.hidden_dim = 32;
  c.ffn_dim = 64;
  c.num_object_queries = 8;
  c.seed = 5;
  return c;
}

struct Fixture {
  SplitSpec split = SplitSpec::default_split();
  CategorySpace space = CategorySpace::default_space();
  Scene scene = render_scene(split, SplitKind::train, 17);
  PromptSet prompts = fixed_prompts(space, split.train_combos);
};

std::vector<NoisySample> samples_for(const Scene& s, std::uint64_t seed) {
  std::vector<GroundTruth> gts;
  for (const auto& a : s.annotations) gts.push_back({a.box, 0});
  Rng rng(seed);
  return generate_noisy_samples(gts, NoiseConfig{}, rng);
}

}  // namespace

TEST(Detector, QueryBlockMaskLayout) {
  Fixture f;
  const auto samples = samples_for(f.scene, 1);
  const auto b = DecoderQueryBlock::make(8, samples);
  const int a = static_cast<int>(samples.size());
  ASSERT_EQ(b.size(), 8 + a);
  EXPECT_FALSE(b.attention_mask.block(0, 8, 8, a).any());
  EXPECT_TRUE(b.attention_mask.block(0, 0, 8, 8).all());
  EXPECT_TRUE(b.attention_mask.block(8, 0, a, 8 + a).all());
}

// Object-query outputs must not change in any bit when auxiliary queries are
// added, whatever the auxiliary content.
TEST(Detector, AuxiliaryQueriesDoNotLeakIntoObjectQueries) {
  Fixture f;
  Detector model(small_config());
  ad::Tape t0(false);
  const auto plain = model.forward(t0, f.scene.image, f.prompts.embeddings, DecoderQueryBlock::objects_only(8));
  for (std::uint64_t s : {1, 2, 3}) {
    ad::Tape t1(false);
    const auto with = model.forward(t1, f.scene.image, f.prompts.embeddings,
                                    DecoderQueryBlock::make(8, samples_for(f.scene, s)));
    ASSERT_EQ(with.levels.size(), plain.levels.size());
    EXPECT_EQ(with.selected, plain.selected);
    for (std::size_t l = 0; l < plain.levels.size(); ++l) {
      EXPECT_EQ(with.levels[l].obj_logits.value(), plain.levels[l].obj_logits.value());
      EXPECT_EQ(with.levels[l].obj_boxes.value(), plain.levels[l].obj_boxes.value());
    }
    EXPECT_TRUE(with.levels.back().has_aux());
  }
}

TEST(Detector, MaskAllowingLeakageIsRejected) {
  Fixture f;
  Detector model(small_config());
  auto b = DecoderQueryBlock::make(8, samples_for(f.scene, 1));
  b.attention_mask(0, 9) = true;
  ad::Tape t(false);
  EXPECT_THROW(model.forward(t, f.scene.image, f.prompts.embeddings, b), ShapeError);
}

TEST(Detector, InferenceMatchesTrainingForwardOnObjectQueries) {
  Fixture f;
  Detector model(small_config());
  ad::Tape t(true);
  const auto fo = model.forward(t, f.scene.image, f.prompts.embeddings,
                                DecoderQueryBlock::make(8, samples_for(f.scene, 4)));
  const auto dets = model.inference(f.scene.image, f.prompts.embeddings, 8);
  ASSERT_EQ(dets.size(), 8u);
  const auto& last = fo.levels.back();
  for (const auto& d : dets) {
    EXPECT_EQ(d.box, center_row_to_box(last.obj_boxes.value(), d.query));
    for (int p = 0; p < f.prompts.size(); ++p)
      EXPECT_EQ(d.scores(p), 1.0 / (1.0 + std::exp(-last.obj_logits.value()(d.query, p))));
  }
  for (std::size_t i = 1; i < dets.size(); ++i) EXPECT_GE(dets[i - 1].max_score(), dets[i].max_score());
}

TEST(Detector, InferenceIsDeterministicAndScoresAreProbabilities) {
  Fixture f;
  Detector a(small_config()), b(small_config());
  const auto da = a.inference(f.scene.image, f.prompts.embeddings);
  const auto db = b.inference(f.scene.image, f.prompts.embeddings);
  ASSERT_EQ(da.size(), db.size());
  for (std::size_t i = 0; i < da.size(); ++i) {
    EXPECT_EQ(da[i].box, db[i].box);
    EXPECT_EQ(da[i].scores, db[i].scores);
    EXPECT_TRUE((da[i].scores.array() > 0).all() && (da[i].scores.array() < 1).all());
    EXPECT_LT(da[i].box.x1, da[i].box.x2);
    EXPECT_LT(da[i].box.y1, da[i].box.y2);
  }
}

TEST(Detector, SelectionPicksTopTokensByBestPromptLogit) {
  Fixture f;
  Detector model(small_config());
  ad::Tape t(false);
  const ad::Var mem = model.encoder_forward(t, model.backbone_forward(t, f.scene.image));
  const ad::Var text = model.project_text(t, f.prompts.embeddings);
  const auto sel = model.select_queries(t, mem, text);
  const Eigen::VectorXd best = model.classify(mem, text).value().rowwise().maxCoeff();
  ASSERT_EQ(sel.indices.size(), 8u);
  std::vector<bool> chosen(static_cast<std::size_t>(best.size()), false);
  for (int i : sel.indices) chosen[static_cast<std::size_t>(i)] = true;
  const double weakest = best(sel.indices.back());
  for (Eigen::Index i = 0; i < best.size(); ++i)
    if (!chosen[static_cast<std::size_t>(i)]) {
      EXPECT_LE(best(i), weakest);
    }
  for (std::size_t i = 1; i < sel.indices.size(); ++i)
    EXPECT_GE(best(sel.indices[i - 1]), best(sel.indices[i]));
}

// Scaling every prompt embedding by s > 0 scales the projected text linearly
// only when the projection bias is zero, which holds at initialization; the
// selection order then stays the same.
TEST(Detector, SelectionInvariantToPositivePromptScale) {
  Fixture f;
  Detector model(small_config());
  ad::Tape t(false);
  const ad::Var mem = model.encoder_forward(t, model.backbone_forward(t, f.scene.image));
  const auto a = model.select_queries(t, mem, model.project_text(t, f.prompts.embeddings));
  const auto b = model.select_queries(t, mem, model.project_text(t, 3.0 * f.prompts.embeddings));
  EXPECT_EQ(a.indices, b.indices);
}

TEST(Detector, NegatedTextFlipsBiasFreeLogits) {
  Fixture f;
  Detector model(small_config());
  model.params().at("cls.bias").value.setZero();
  ad::Tape t(false);
  const ad::Var mem = model.encoder_forward(t, model.backbone_forward(t, f.scene.image));
  const ad::Matrix pos = model.classify(mem, model.project_text(t, f.prompts.embeddings)).value();
  const ad::Matrix neg = model.classify(mem, model.project_text(t, -f.prompts.embeddings)).value();
  EXPECT_EQ(pos, -neg);
}

TEST(Detector, ZeroImageGivesPositionalTokens) {
  Detector model(small_config());
  ad::Tape t(false);
  const Image zero(64, 64);
  const ad::Matrix tok = model.backbone_forward(t, zero).value();
  ad::Tape t2(false);
  Image one(64, 64);
  one.raw(0, 0, 0) = 255;
  const ad::Matrix tok2 = model.backbone_forward(t2, one).value();
  // Only the first patch sees the changed pixel.
  EXPECT_EQ(tok.bottomRows(tok.rows() - 1), tok2.bottomRows(tok.rows() - 1));
  EXPECT_NE(tok.row(0), tok2.row(0));
  const ad::Matrix& w = model.params().at("backbone.embed.w").value;
  EXPECT_LT((tok2.row(0) - tok.row(0) - w.row(0)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Detector, ZeroDecoderLayersYieldsProposalsOnly) {
  Fixture f;
  auto c = small_config();
  c.decoder_layers = 0;
  Detector model(c);
  ad::Tape t(false);
  const auto fo = model.forward(t, f.scene.image, f.prompts.embeddings, DecoderQueryBlock::objects_only(8));
  EXPECT_EQ(fo.levels.size(), 1u);
  EXPECT_EQ(model.inference(f.scene.image, f.prompts.embeddings).size(), 8u);
}

TEST(Detector, MoreQueriesThanTokensClampsToTokens) {
  Fixture f;
  auto c = small_config();
  c.num_object_queries = 100;
  Detector model(c);
  EXPECT_EQ(model.inference(f.scene.image, f.prompts.embeddings, 1000).size(),
            static_cast<std::size_t>(c.num_tokens()));
}

TEST(Detector, ShapeErrors) {
  Fixture f;
  Detector model(small_config());
  ad::Tape t(false);
  EXPECT_THROW(model.backbone_forward(t, Image(32, 32)), ShapeError);
  EXPECT_THROW(model.project_text(t, Eigen::MatrixXd::Zero(2, 7)), ShapeError);
  EXPECT_THROW(model.forward(t, f.scene.image, f.prompts.embeddings, DecoderQueryBlock::objects_only(5)),
               ShapeError);
  auto c = small_config();
  c.hidden_dim = 30;
  EXPECT_THROW(Detector{c}, ValidationError);
}
