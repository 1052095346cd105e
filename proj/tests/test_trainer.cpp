#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

#include <unistd.h>

#include "aligndet/checkpoint.hpp"
#include "aligndet/errors.hpp"
#include "aligndet/trainer.hpp"

using namespace aligndet;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.hidden_dim = 32;
  c.ffn_dim = 64;
  c.num_object_queries = 8;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.seed = 3;
  return c;
}

TrainConfig tiny_train(int iterations = 6) {
  TrainConfig c;
  c.iterations = iterations;
  c.batch_size = 2;
  c.lr = 1e-3;
  c.seed = 4;
  return c;
}

struct World {
  SplitSpec split = SplitSpec::default_split();
  CategorySpace space = CategorySpace::default_space();
  std::vector<Scene> data = generate_scenes(split, SplitKind::train, 8, 21);
};

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("aligndet_trainer_" + name + "_" + std::to_string(::getpid()));
}

void expect_same_params(const ParameterStore& a, const ParameterStore& b) {
  ASSERT_EQ(a.all().size(), b.all().size());
  for (const auto& [n, p] : a.all()) EXPECT_EQ(p.value, b.at(n).value) << n;
}

}  // namespace

TEST(LearningRate, DropsAtThreeQuarters) {
  TrainConfig c;
  c.iterations = 100;
  c.lr = 1e-4;
  EXPECT_DOUBLE_EQ(learning_rate(c, 0), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 74), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 75), 1e-5);
  EXPECT_DOUBLE_EQ(learning_rate(c, 76), 1e-5);
  c.iterations = 6000;
  EXPECT_DOUBLE_EQ(learning_rate(c, 4499), 1e-4);
  EXPECT_DOUBLE_EQ(learning_rate(c, 4500), 1e-5);
}

TEST(TrainConfigJson, RoundTripAndUnknownKeys) {
  TrainConfig c = tiny_train();
  c.use_dwcl = false;
  c.dwcl.beta1 = 1.5;
  c.noise.lambda = 0.3;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  auto j = to_json(c);
  j["learning_rate"] = 1.0;
  EXPECT_THROW(train_config_from_json(j), ValidationError);
  auto k = to_json(c);
  k["dwcl"]["beta3"] = 1.0;
  EXPECT_THROW(train_config_from_json(k), ValidationError);
  EXPECT_EQ(train_config_from_json(nlohmann::json::object()).iterations, TrainConfig{}.iterations);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.stage = 3;
  EXPECT_THROW(c.validate(), ValidationError);
  c = {};
  c.lr = -1;
  EXPECT_THROW(c.validate(), ValidationError);
}

TEST(Targets, PromptsAndSamplesFollowTheScene) {
  World w;
  TrainConfig cfg;
  Rng rng(1);
  const auto& s = w.data[0];
  const auto t = make_targets(s, w.space, w.split.train_combos, cfg, rng);
  ASSERT_EQ(t.targets.size(), s.annotations.size());
  for (std::size_t i = 0; i < t.targets.size(); ++i) {
    EXPECT_EQ(t.targets[i].box, s.annotations[i].box);
    EXPECT_EQ(t.prompts.categories[static_cast<std::size_t>(t.targets[i].prompt_index)],
              s.annotations[i].category);
  }
  EXPECT_EQ(t.samples.size(), s.annotations.size() * static_cast<std::size_t>(cfg.noise.per_target()));
  for (const auto& smp : t.samples) {
    EXPECT_GT(smp.initial_iou, 0.5);
    EXPECT_EQ(smp.category_id, t.targets[static_cast<std::size_t>(smp.gt_index)].prompt_index);
  }
  cfg.use_aux = false;
  Rng rng2(1);
  EXPECT_TRUE(make_targets(s, w.space, w.split.train_combos, cfg, rng2).samples.empty());
}

TEST(Objective, TotalIsTheWeightedSumOfItsTerms) {
  World w;
  TrainConfig cfg;
  Detector model(tiny_model());
  Rng rng(2);
  const auto t = make_targets(w.data[1], w.space, w.split.train_combos, cfg, rng);
  ad::Tape tape;
  const auto fo = model.forward(tape, w.data[1].image, t.prompts.embeddings, DecoderQueryBlock::make(8, t.samples));
  const auto obj = image_objective(fo, t, cfg);
  ASSERT_EQ(obj.obj.size(), fo.levels.size());
  ASSERT_EQ(obj.aux.size(), fo.levels.size());
  EXPECT_NEAR(obj.total, total_objective(obj.obj, obj.aux, cfg.weights), 1e-12);
  for (const auto& m : obj.matches) EXPECT_EQ(m.pairs.size(), t.targets.size());
  EXPECT_GT(obj.total, 0.0);
}

TEST(Objective, NoAuxLevelsWithoutAuxQueries) {
  World w;
  TrainConfig cfg;
  cfg.use_aux = false;
  Detector model(tiny_model());
  Rng rng(2);
  const auto t = make_targets(w.data[1], w.space, w.split.train_combos, cfg, rng);
  ad::Tape tape;
  const auto fo = model.forward(tape, w.data[1].image, t.prompts.embeddings, DecoderQueryBlock::objects_only(8));
  const auto obj = image_objective(fo, t, cfg);
  for (const auto& a : obj.aux) EXPECT_EQ(a.cls + a.l1 + a.giou, 0.0);
}

TEST(Training, ZeroIterationsLeavesTheModelUntouched) {
  World w;
  TrainState st = init_stage1(tiny_train(0), tiny_model(), w.space, w.split);
  const Detector before = st.model;
  EXPECT_TRUE(run_training(st, w.data).empty());
  expect_same_params(before.params(), st.model.params());
}

TEST(Training, SameSeedSameWeightsAndMetrics) {
  World w;
  TrainState a = init_stage1(tiny_train(), tiny_model(), w.space, w.split);
  TrainState b = init_stage1(tiny_train(), tiny_model(), w.space, w.split);
  std::ostringstream ma, mb;
  run_training(a, w.data, {.metrics = &ma});
  run_training(b, w.data, {.metrics = &mb});
  expect_same_params(a.model.params(), b.model.params());
  EXPECT_EQ(ma.str(), mb.str());
  EXPECT_EQ(a.model.params().fingerprint(), b.model.params().fingerprint());

  auto other = tiny_train();
  other.seed = 5;
  TrainState c = init_stage1(other, tiny_model(), w.space, w.split);
  run_training(c, w.data);
  EXPECT_NE(a.model.params().fingerprint(), c.model.params().fingerprint());
}

TEST(Training, ResumeFromCheckpointIsBitIdentical) {
  World w;
  const auto path = temp_file("resume");
  TrainState full = init_stage1(tiny_train(), tiny_model(), w.space, w.split);
  std::ostringstream m_full;
  run_training(full, w.data, {.metrics = &m_full});

  TrainState part = init_stage1(tiny_train(), tiny_model(), w.space, w.split);
  std::ostringstream m_part;
  run_training(part, w.data, {.stop_after = 3, .metrics = &m_part, .checkpoint_path = path});
  EXPECT_EQ(part.iteration, 3);
  TrainState resumed = load_state(path);
  EXPECT_EQ(resumed.iteration, 3);
  EXPECT_EQ(resumed.optimizer.steps(), 3);
  run_training(resumed, w.data, {.metrics = &m_part});
  expect_same_params(full.model.params(), resumed.model.params());
  EXPECT_EQ(m_full.str(), m_part.str());
  for (const auto& [n, m] : full.optimizer.first_moments()) EXPECT_EQ(m, resumed.optimizer.first_moments().at(n));
  fs::remove(path);
}

TEST(Training, StageTwoStartsFromStageOneWithIdentityFusion) {
  World w;
  TrainState s1 = init_stage1(tiny_train(2), tiny_model(), w.space, w.split);
  run_training(s1, w.data);
  auto cfg2 = tiny_train(2);
  cfg2.stage = 2;
  TrainState s2 = init_stage2(s1, cfg2);
  EXPECT_TRUE(s2.model.fusion_enabled());
  EXPECT_EQ(s2.iteration, 0);
  EXPECT_EQ(s2.optimizer.steps(), 0);
  for (const auto& [n, p] : s1.model.params().all()) EXPECT_EQ(p.value, s2.model.params().at(n).value) << n;
  const auto prompts = fixed_prompts(w.space, w.split.train_combos);
  const auto a = s1.model.inference(w.data[0].image, prompts.embeddings);
  const auto b = s2.model.inference(w.data[0].image, prompts.embeddings);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].scores, b[i].scores);
  run_training(s2, w.data);
  EXPECT_NE(s2.model.params().at("fusion.attn.wo").value.norm(), 0.0);
}

TEST(Training, StageTwoCheckpointRoundTrip) {
  World w;
  TrainState s1 = init_stage1(tiny_train(1), tiny_model(), w.space, w.split);
  auto cfg2 = tiny_train(1);
  cfg2.stage = 2;
  TrainState s2 = init_stage2(s1, cfg2);
  run_training(s2, w.data);
  const auto path = temp_file("s2");
  save_state(path, s2);
  const TrainState back = load_state(path);
  EXPECT_TRUE(back.model.fusion_enabled());
  EXPECT_EQ(back.config.stage, 2);
  expect_same_params(s2.model.params(), back.model.params());
  EXPECT_EQ(back.space.fingerprint(), s2.space.fingerprint());
  EXPECT_EQ(back.split, s2.split);
  fs::remove(path);
}

TEST(Training, BatchLossBreakdownSumsToTotal) {
  World w;
  TrainState st = init_stage1(tiny_train(1), tiny_model(), w.space, w.split);
  const StepStats s = train_step(st, w.data);
  EXPECT_NEAR(s.total, weighted(s.obj, st.config.weights) + weighted(s.aux, st.config.weights), 1e-12);
  EXPECT_GT(s.aux.cls, 0.0);
  EXPECT_GT(s.grad_norm, 0.0);
  EXPECT_FALSE(s.dwcl_skipped);
}

TEST(Training, EmptyDataIsAnError) {
  World w;
  TrainState st = init_stage1(tiny_train(1), tiny_model(), w.space, w.split);
  EXPECT_THROW(train_step(st, {}), ValidationError);
}

// Overfitting a single scene must drive the loss well down.
TEST(Training, SingleSceneSmokeConvergence) {
  World w;
  auto cfg = tiny_train(200);
  cfg.batch_size = 1;
  cfg.grad_clip = 1.0;
  TrainState st = init_stage1(cfg, tiny_model(), w.space, w.split);
  const std::vector<Scene> one{w.data[0]};
  const auto log = run_training(st, one);
  double first = 0, last = 0;
  for (int i = 0; i < 10; ++i) {
    first += log[static_cast<std::size_t>(i)].total;
    last += log[log.size() - 1 - static_cast<std::size_t>(i)].total;
  }
  EXPECT_LT(last, 0.5 * first);
}
