#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "aligndet/detector.hpp"
#include "aligndet/losses.hpp"
#include "aligndet/matching.hpp"
#include "aligndet/params.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/textspace.hpp"

namespace aligndet {

struct TrainConfig {
  int stage = 1;  ///< 1: detector only; 2: detector plus text-to-image fusion
  int iterations = 2000;
  int batch_size = 4;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double lr_drop_fraction = 0.75;
  double lr_drop_factor = 0.1;
  double grad_clip = 0.1;  ///< max global gradient norm; <= 0 disables clipping
  bool use_aux = true;     ///< one-to-many auxiliary queries
  bool use_dwcl = true;    ///< difficulty weighting on the auxiliary classification term
  int num_negative_prompts = 8;  ///< capped per image by the remaining label space
  NoiseConfig noise{};
  DwclParams dwcl{};
  FocalParams focal{};
  LossWeights weights{};
  std::uint64_t seed = 0;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; unknown keys raise ValidationError.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Step schedule: base rate until floor(lr_drop_fraction * iterations),
/// then base * lr_drop_factor.
double learning_rate(const TrainConfig& c, int iteration);

/// Per-image supervision: annotations mapped onto the prompt columns.
struct ImageTargets {
  std::vector<MatchTarget> targets;
  std::vector<NoisySample> samples;  ///< auxiliary queries, one per sample
  PromptSet prompts;
};

/// Builds the prompt set and noisy samples of one training image.
ImageTargets make_targets(const Scene& scene, const CategorySpace& space,
                          const std::vector<Category>& label_space, const TrainConfig& cfg,
                          Rng& rng);

struct ImageObjective {
  std::vector<LossTerms> obj;  ///< per level, normalized by the ground-truth count
  std::vector<LossTerms> aux;  ///< per level, normalized by the auxiliary count
  double total = 0;
  std::vector<Assignment> matches;  ///< per level
  /// d(total)/d(output) for every prediction tensor, ready for Tape::backward.
  std::vector<std::pair<ad::Var, ad::Matrix>> seeds;
};

/// Matches object queries per level (Hungarian, or `forced_matches`) and
/// assembles the weighted objective summed over all supervised levels.
/// `dwcl_normalizer` is the batch mean difficulty; when absent the image's
/// own samples define it.
ImageObjective image_objective(const ForwardOutput& fo, const ImageTargets& t, const TrainConfig& cfg,
                               std::optional<double> dwcl_normalizer = {},
                               const std::vector<Assignment>* forced_matches = nullptr);

struct StepStats {
  int iteration = 0;
  double lr = 0;
  LossTerms obj;  ///< summed over levels, averaged over the batch
  LossTerms aux;
  double total = 0;
  double grad_norm = 0;  ///< before clipping
  bool dwcl_skipped = false;
};

/// Everything needed to continue a run bit-exactly.
struct TrainState {
  TrainConfig config;
  Detector model;
  AdamW optimizer;
  CategorySpace space;
  SplitSpec split;
  int iteration = 0;  ///< number of completed steps
};

/// Fresh stage-1 state.
TrainState init_stage1(const TrainConfig& cfg, const ModelConfig& model_cfg, const CategorySpace& space,
                       const SplitSpec& split);
/// Stage 2 starts from stage-1 weights with fusion added as an exact
/// identity and a fresh optimizer and schedule.
TrainState init_stage2(const TrainState& stage1, const TrainConfig& cfg);

/// One optimization step on the batch drawn for `state.iteration`.
StepStats train_step(TrainState& state, const std::vector<Scene>& data);

struct RunOptions {
  int stop_after = -1;  ///< stop once this many steps are done (simulated interruption)
  std::ostream* metrics = nullptr;  ///< CSV rows, one per step
  std::filesystem::path checkpoint_path;
  int checkpoint_every = 0;
  std::function<void(const StepStats&)> on_step;
};

/// Runs steps until config.iterations (or stop_after) and saves the final
/// state to checkpoint_path when given.
std::vector<StepStats> run_training(TrainState& state, const std::vector<Scene>& data,
                                    const RunOptions& opts = {});

std::string metrics_header();
std::string metrics_row(const StepStats& s);

void save_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_state(const std::filesystem::path& path);

}  // namespace aligndet
