#include "aligndet/evaluator.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "aligndet/errors.hpp"

namespace aligndet {

std::vector<bool> match_detections(const std::vector<ScoredBox>& dets, const std::vector<Boxd>& gts,
                                   double thr) {
  std::vector<bool> taken(gts.size(), false), tp(dets.size(), false);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = thr;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      const double v = iou(dets[d].box, gts[g]);
      if (v >= best_iou && (best < 0 || v > best_iou)) {
        best = static_cast<int>(g);
        best_iou = v;
      }
    }
    if (best >= 0) {
      taken[static_cast<std::size_t>(best)] = true;
      tp[d] = true;
    }
  }
  return tp;
}

double average_precision(const std::vector<bool>& tp, int num_gt) {
  if (num_gt <= 0 || tp.empty()) return 0.0;
  const std::size_t n = tp.size();
  std::vector<double> precision(n), recall(n);
  double hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    hits += tp[i] ? 1 : 0;
    precision[i] = hits / static_cast<double>(i + 1);
    recall[i] = hits / num_gt;
  }
  for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

EvalResult evaluate_detections(const std::vector<std::vector<CategoryDetection>>& detections,
                               const std::vector<std::vector<Annotation>>& annotations,
                               const std::vector<Category>& categories, int max_dets) {
  if (detections.size() != annotations.size())
    throw ShapeError("detections and annotations cover different image counts");
  const std::size_t C = categories.size();
  const auto thresholds = coco_thresholds();
  EvalResult r;
  r.categories = categories;
  r.num_images = static_cast<int>(annotations.size());

  // per image, per category: kept detections (score-sorted) and gt boxes
  std::vector<std::vector<std::vector<ScoredBox>>> dets(detections.size(),
                                                        std::vector<std::vector<ScoredBox>>(C));
  std::vector<std::vector<std::vector<Boxd>>> gts(annotations.size(), std::vector<std::vector<Boxd>>(C));
  std::vector<int> num_gt(C, 0), num_det(C, 0);
  for (std::size_t i = 0; i < annotations.size(); ++i) {
    for (const auto& a : annotations[i]) {
      auto it = std::find(categories.begin(), categories.end(), a.category);
      if (it == categories.end()) continue;
      const auto c = static_cast<std::size_t>(it - categories.begin());
      gts[i][c].push_back(a.box);
      ++num_gt[c];
      ++r.num_gt;
    }
    std::vector<CategoryDetection> kept = detections[i];
    std::stable_sort(kept.begin(), kept.end(),
                     [](const auto& a, const auto& b) { return a.score > b.score; });
    if (static_cast<int>(kept.size()) > max_dets) kept.resize(static_cast<std::size_t>(max_dets));
    for (const auto& d : kept) {
      if (d.category < 0 || static_cast<std::size_t>(d.category) >= C)
        throw ShapeError("detection category index out of range");
      dets[i][static_cast<std::size_t>(d.category)].push_back({d.box, d.score});
      ++num_det[static_cast<std::size_t>(d.category)];
    }
  }

  std::vector<std::vector<double>> ap_ct(C, std::vector<double>(thresholds.size(), 0.0));
  for (std::size_t c = 0; c < C; ++c) {
    if (num_gt[c] == 0 && num_det[c] == 0) continue;
    for (std::size_t t = 0; t < thresholds.size(); ++t) {
      struct Row {
        double score;
        std::size_t image, rank;
        bool tp;
      };
      std::vector<Row> rows;
      for (std::size_t i = 0; i < dets.size(); ++i) {
        const auto flags = match_detections(dets[i][c], gts[i][c], thresholds[t]);
        for (std::size_t k = 0; k < flags.size(); ++k) rows.push_back({dets[i][c][k].score, i, k, flags[k]});
      }
      std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.score > b.score; });
      std::vector<bool> tp;
      for (const auto& row : rows) tp.push_back(row.tp);
      ap_ct[c][t] = average_precision(tp, num_gt[c]);
    }
  }

  r.ap.assign(C, std::nullopt);
  r.map_per_threshold.assign(thresholds.size(), 0.0);
  int evaluated = 0;
  for (std::size_t c = 0; c < C; ++c) {
    if (num_gt[c] == 0 && num_det[c] == 0) continue;
    ++evaluated;
    r.ap[c] = std::accumulate(ap_ct[c].begin(), ap_ct[c].end(), 0.0) / static_cast<double>(thresholds.size());
    for (std::size_t t = 0; t < thresholds.size(); ++t) r.map_per_threshold[t] += ap_ct[c][t];
  }
  if (evaluated > 0)
    for (auto& m : r.map_per_threshold) m /= evaluated;
  r.map = std::accumulate(r.map_per_threshold.begin(), r.map_per_threshold.end(), 0.0) /
          static_cast<double>(thresholds.size());
  r.map50 = r.map_per_threshold[0];
  r.map75 = r.map_per_threshold[5];
  return r;
}

EvalResult evaluate_model(const Detector& model, const CategorySpace& space,
                          const std::vector<Scene>& scenes, const std::vector<Category>& categories,
                          int max_dets) {
  const PromptSet prompts = fixed_prompts(space, categories);
  std::vector<std::vector<CategoryDetection>> all;
  std::vector<std::vector<Annotation>> anns;
  for (const auto& s : scenes) {
    std::vector<CategoryDetection> rows;
    for (const auto& d : model.inference(s.image, prompts.embeddings, model.config().num_object_queries))
      for (Eigen::Index p = 0; p < d.scores.size(); ++p)
        rows.push_back({d.box, d.scores(p), static_cast<int>(p)});
    all.push_back(std::move(rows));
    anns.push_back(s.annotations);
  }
  return evaluate_detections(all, anns, categories, max_dets);
}

EvalResult zero_shot_eval(const Detector& model, const CategorySpace& space, const SplitSpec& split,
                          const std::vector<Scene>& scenes, int max_dets) {
  const std::set<Category> train(split.train_combos.begin(), split.train_combos.end());
  for (const auto& c : split.heldout_combos)
    if (train.contains(c))
      throw SplitContamination("held-out combination '" + c.name() + "' is also a training combination");
  for (const auto& s : scenes)
    for (const auto& a : s.annotations)
      if (train.contains(a.category))
        throw SplitContamination("scene " + std::to_string(s.scene_id) + " contains training category '" +
                                 a.category.name() + "'");
  return evaluate_model(model, space, scenes, split.heldout_combos, max_dets);
}

}  // namespace aligndet
