#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "aligndet/evaluator.hpp"
#include "aligndet/trainer.hpp"

namespace aligndet {

struct AblationConfig {
  ModelConfig model{};
  TrainConfig stage1{};  ///< use_aux / use_dwcl are overridden per cell
  TrainConfig stage2{};  ///< schedule of the fusion fine-tuning stage
  std::vector<std::uint64_t> seeds{0, 1, 2};
};

struct AblationRow {
  std::string name;
  bool o2m = false;
  bool dwcl = false;
  bool fusion = false;
  double beta1 = 0;  ///< only meaningful when dwcl is on
  double beta2 = 0;
  std::vector<double> per_seed;  ///< zero-shot mAP; NaN for a failed cell
  std::string error;             ///< first failure message, if any

  double mean() const;
  double stddev() const;  ///< sample standard deviation over finished seeds
};

using AblationLog = std::function<void(const std::string&)>;

/// Component ablation: baseline, +O2M, +O2M+DWCL (stage 1 only) and full
/// (the O2M+DWCL checkpoint fine-tuned with fusion), each over every seed,
/// scored by held-out-combo mAP. A failing cell is recorded and skipped.
std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const std::vector<Scene>& train,
                                      const std::vector<Scene>& heldout, const CategorySpace& space,
                                      const SplitSpec& split, const AblationLog& log = {});

/// Focal versus DWCL under several (beta1, beta2) pairs, stage 1 with O2M.
std::vector<AblationRow> run_beta_sweep(const AblationConfig& cfg,
                                        const std::vector<std::pair<double, double>>& betas,
                                        const std::vector<Scene>& train,
                                        const std::vector<Scene>& heldout, const CategorySpace& space,
                                        const SplitSpec& split, const AblationLog& log = {});

/// Pooled standard deviation of two rows (equal weights per finished seed).
double pooled_stddev(const AblationRow& a, const AblationRow& b);

std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace aligndet
