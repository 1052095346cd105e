#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aligndet/detector.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/textspace.hpp"

namespace aligndet {

struct ScoredBox {
  Boxd box;
  double score = 0;
};

/// Greedy matching of score-sorted detections (highest first) against one
/// image's ground truth of the same category: each detection claims the
/// highest-IoU unmatched box with IoU >= threshold. Returns TP flags.
std::vector<bool> match_detections(const std::vector<ScoredBox>& sorted_dets,
                                   const std::vector<Boxd>& gts, double iou_threshold);

/// 101-point interpolated AP from TP flags ordered by descending score.
/// Zero when num_gt is zero.
double average_precision(const std::vector<bool>& tp_sorted, int num_gt);

/// One detection row: a (query, prompt) pair of one image.
struct CategoryDetection {
  Boxd box;
  double score = 0;
  int category = 0;  ///< index into the evaluated category list
};

struct EvalResult {
  std::vector<Category> categories;
  /// AP over thresholds 0.50:0.05:0.95 per category; absent for categories
  /// with neither ground truth nor detections.
  std::vector<std::optional<double>> ap;
  std::vector<double> map_per_threshold;  ///< 10 entries
  double map = 0;                         ///< mean over thresholds and categories
  double map50 = 0;
  double map75 = 0;
  int num_images = 0;
  int num_gt = 0;
};

std::vector<double> coco_thresholds();

/// Scores per-image detections against annotations. At most `max_dets`
/// detections per image are kept, best first.
EvalResult evaluate_detections(const std::vector<std::vector<CategoryDetection>>& detections,
                               const std::vector<std::vector<Annotation>>& annotations,
                               const std::vector<Category>& categories, int max_dets = 100);

/// Runs the detector on every scene with all of `categories` as prompts and
/// evaluates the top `max_dets` (query, prompt) pairs per image.
EvalResult evaluate_model(const Detector& model, const CategorySpace& space,
                          const std::vector<Scene>& scenes, const std::vector<Category>& categories,
                          int max_dets = 100);

/// Evaluation on held-out category combinations. Throws SplitContamination
/// when the split's training combos overlap its held-out combos or when a
/// scene carries a category the model was trained on.
EvalResult zero_shot_eval(const Detector& model, const CategorySpace& space, const SplitSpec& split,
                          const std::vector<Scene>& heldout_scenes, int max_dets = 100);

}  // namespace aligndet
