#include "aligndet/trainer.hpp"

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <ostream>
#include <set>

#include "aligndet/checkpoint.hpp"
#include "aligndet/errors.hpp"

namespace aligndet {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (stage != 1 && stage != 2) throw ValidationError("stage must be 1 or 2");
  if (iterations < 0) throw ValidationError("iterations must be >= 0");
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (!(lr > 0)) throw ValidationError("lr must be positive");
  if (weight_decay < 0) throw ValidationError("weight_decay must be non-negative");
  if (!(lr_drop_fraction >= 0 && lr_drop_fraction <= 1)) throw ValidationError("lr_drop_fraction must lie in [0,1]");
  if (!(lr_drop_factor > 0)) throw ValidationError("lr_drop_factor must be positive");
  if (num_negative_prompts < 0) throw ValidationError("num_negative_prompts must be non-negative");
  if (!(focal.alpha >= 0 && focal.alpha <= 1) || focal.gamma < 0) throw ValidationError("bad focal parameters");
  if (dwcl.beta1 < 0 || dwcl.beta2 < 0) throw ValidationError("dwcl betas must be non-negative");
  if (weights.w_cls < 0 || weights.w_l1 < 0 || weights.w_giou < 0) throw ValidationError("loss weights must be non-negative");
  if (use_aux) noise.validate();
}

json to_json(const TrainConfig& c) {
  return {{"stage", c.stage},
          {"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"lr_drop_fraction", c.lr_drop_fraction},
          {"lr_drop_factor", c.lr_drop_factor},
          {"grad_clip", c.grad_clip},
          {"use_aux", c.use_aux},
          {"use_dwcl", c.use_dwcl},
          {"num_negative_prompts", c.num_negative_prompts},
          {"noise",
           {{"lambda", c.noise.lambda},
            {"m_perturbed", c.noise.m_perturbed},
            {"m_expanded", c.noise.m_expanded},
            {"expansion_lo", c.noise.expansion_lo},
            {"expansion_hi", c.noise.expansion_hi},
            {"max_rejection_resamples", c.noise.max_rejection_resamples}}},
          {"dwcl", {{"beta1", c.dwcl.beta1}, {"beta2", c.dwcl.beta2}}},
          {"focal", {{"alpha", c.focal.alpha}, {"gamma", c.focal.gamma}}},
          {"weights", {{"w_cls", c.weights.w_cls}, {"w_l1", c.weights.w_l1}, {"w_giou", c.weights.w_giou}}},
          {"seed", c.seed}};
}

namespace {

void reject_unknown(const json& j, const json& reference, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    if (!reference.contains(k)) throw ValidationError("unknown key '" + where + k + "'");
    if (reference[k].is_object()) reject_unknown(v, reference[k], where + k + ".");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(std::string("key '") + key + "' has the wrong type");
  }
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Loss is evaluated at the clamped probability, so no gradient flows where
/// the clamp is active.
double dp_dlogit(double p) { return (p < kProbEps || p > 1 - kProbEps) ? 0.0 : p * (1 - p); }

}  // namespace

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  reject_unknown(j, to_json(c), "");
  read(j, "stage", c.stage);
  read(j, "iterations", c.iterations);
  read(j, "batch_size", c.batch_size);
  read(j, "lr", c.lr);
  read(j, "weight_decay", c.weight_decay);
  read(j, "lr_drop_fraction", c.lr_drop_fraction);
  read(j, "lr_drop_factor", c.lr_drop_factor);
  read(j, "grad_clip", c.grad_clip);
  read(j, "use_aux", c.use_aux);
  read(j, "use_dwcl", c.use_dwcl);
  read(j, "num_negative_prompts", c.num_negative_prompts);
  read(j, "seed", c.seed);
  if (j.contains("noise")) {
    const json& n = j["noise"];
    read(n, "lambda", c.noise.lambda);
    read(n, "m_perturbed", c.noise.m_perturbed);
    read(n, "m_expanded", c.noise.m_expanded);
    read(n, "expansion_lo", c.noise.expansion_lo);
    read(n, "expansion_hi", c.noise.expansion_hi);
    read(n, "max_rejection_resamples", c.noise.max_rejection_resamples);
  }
  if (j.contains("dwcl")) {
    read(j["dwcl"], "beta1", c.dwcl.beta1);
    read(j["dwcl"], "beta2", c.dwcl.beta2);
  }
  if (j.contains("focal")) {
    read(j["focal"], "alpha", c.focal.alpha);
    read(j["focal"], "gamma", c.focal.gamma);
  }
  if (j.contains("weights")) {
    read(j["weights"], "w_cls", c.weights.w_cls);
    read(j["weights"], "w_l1", c.weights.w_l1);
    read(j["weights"], "w_giou", c.weights.w_giou);
  }
  c.dwcl.focal_neg = c.focal;
  c.validate();
  return c;
}

double learning_rate(const TrainConfig& c, int iteration) {
  const auto drop = static_cast<int>(std::floor(c.lr_drop_fraction * c.iterations));
  return iteration < drop ? c.lr : c.lr * c.lr_drop_factor;
}

ImageTargets make_targets(const Scene& scene, const CategorySpace& space,
                          const std::vector<Category>& label_space, const TrainConfig& cfg, Rng& rng) {
  ImageTargets t;
  std::vector<Category> cats;
  for (const auto& a : scene.annotations) cats.push_back(a.category);
  const std::set<Category> distinct(cats.begin(), cats.end());
  const int available = static_cast<int>(label_space.size()) - static_cast<int>(distinct.size());
  t.prompts = sample_prompts(space, cats, label_space, std::clamp(cfg.num_negative_prompts, 0, std::max(available, 0)), rng);
  std::vector<GroundTruth> gts;
  for (const auto& a : scene.annotations) {
    const int p = t.prompts.index_of(a.category);
    t.targets.push_back({a.box, p});
    gts.push_back({a.box, p});
  }
  if (cfg.use_aux && !gts.empty()) {
    NoiseConfig nc = cfg.noise;
    t.samples = generate_noisy_samples(gts, nc, rng);
  }
  return t;
}

ImageObjective image_objective(const ForwardOutput& fo, const ImageTargets& t, const TrainConfig& cfg,
                               std::optional<double> dwcl_normalizer,
                               const std::vector<Assignment>* forced) {
  const LossWeights& w = cfg.weights;
  const double n_gt = std::max<double>(1.0, static_cast<double>(t.targets.size()));
  ImageObjective out;

  for (std::size_t l = 0; l < fo.levels.size(); ++l) {
    const LevelOutput& L = fo.levels[l];
    const ad::Matrix& logits = L.obj_logits.value();
    const ad::Matrix& boxes = L.obj_boxes.value();
    const ad::Matrix probs = logits.unaryExpr(&sigmoid);
    const Eigen::Index nq = logits.rows(), np = logits.cols();

    Assignment asg;
    if (forced) {
      asg = forced->at(l);
    } else if (!t.targets.empty()) {
      std::vector<Boxd> qb;
      for (Eigen::Index q = 0; q < nq; ++q) qb.push_back(center_row_to_box(boxes, q));
      asg = hungarian(build_cost_matrix(probs, qb, t.targets, w));
    }

    LossTerms obj;
    ad::Matrix labels = ad::Matrix::Zero(nq, np);
    for (auto [q, k] : asg.pairs) labels(q, t.targets[static_cast<std::size_t>(k)].prompt_index) = 1;
    ad::Matrix g_logit(nq, np);
    for (Eigen::Index q = 0; q < nq; ++q)
      for (Eigen::Index p = 0; p < np; ++p) {
        const double pr = probs(q, p);
        const auto lg = focal_loss(clamp_probability(pr), static_cast<int>(labels(q, p)), cfg.focal);
        obj.cls += lg.loss / n_gt;
        g_logit(q, p) = w.w_cls * lg.dloss_dp * dp_dlogit(pr) / n_gt;
      }
    ad::Matrix g_box = ad::Matrix::Zero(nq, 4);
    for (auto [q, k] : asg.pairs) {
      const auto r = box_losses(center_row_to_box(boxes, q), t.targets[static_cast<std::size_t>(k)].box);
      obj.l1 += r.l1 / n_gt;
      obj.giou += r.giou_loss / n_gt;
      const auto a = corner_grad_to_center(r.dl1), b = corner_grad_to_center(r.dgiou);
      for (int j = 0; j < 4; ++j) g_box(q, j) = (w.w_l1 * a[j] + w.w_giou * b[j]) / n_gt;
    }
    out.seeds.emplace_back(L.obj_logits, std::move(g_logit));
    out.seeds.emplace_back(L.obj_boxes, std::move(g_box));
    out.obj.push_back(obj);
    out.matches.push_back(std::move(asg));

    LossTerms aux;
    if (L.has_aux() && !t.samples.empty()) {
      const ad::Matrix aprobs = L.aux_logits.value().unaryExpr(&sigmoid);
      const ad::Matrix& aboxes = L.aux_boxes.value();
      const Eigen::Index na = aprobs.rows();
      const double n_aux = static_cast<double>(na);
      DwclBatch batch;
      for (Eigen::Index k = 0; k < na; ++k) {
        const auto& s = t.samples[static_cast<std::size_t>(k)];
        const int pos = t.targets[static_cast<std::size_t>(s.gt_index)].prompt_index;
        for (Eigen::Index p = 0; p < np; ++p) {
          batch.probs.push_back(clamp_probability(aprobs(k, p)));
          batch.labels.push_back(p == pos ? 1 : 0);
          batch.initial_ious.push_back(s.initial_iou);
        }
      }
      std::vector<double> dldp(batch.probs.size());
      if (cfg.use_dwcl && dwcl_normalizer.value_or(1.0) > 0) {
        DwclParams dp = cfg.dwcl;
        dp.focal_neg = cfg.focal;
        const DwclResult r = dwcl_loss(batch, dp, dwcl_normalizer);
        aux.cls = r.total / n_aux;
        dldp = r.dloss_dp;
      } else {
        for (std::size_t i = 0; i < batch.probs.size(); ++i) {
          const auto lg = focal_loss(batch.probs[i], batch.labels[i], cfg.focal);
          aux.cls += lg.loss / n_aux;
          dldp[i] = lg.dloss_dp;
        }
      }
      ad::Matrix ga_logit(na, np);
      for (Eigen::Index k = 0; k < na; ++k)
        for (Eigen::Index p = 0; p < np; ++p)
          ga_logit(k, p) = w.w_cls * dldp[static_cast<std::size_t>(k * np + p)] * dp_dlogit(aprobs(k, p)) / n_aux;
      ad::Matrix ga_box(na, 4);
      for (Eigen::Index k = 0; k < na; ++k) {
        const auto& s = t.samples[static_cast<std::size_t>(k)];
        const auto r = box_losses(center_row_to_box(aboxes, k), t.targets[static_cast<std::size_t>(s.gt_index)].box);
        aux.l1 += r.l1 / n_aux;
        aux.giou += r.giou_loss / n_aux;
        const auto a = corner_grad_to_center(r.dl1), b = corner_grad_to_center(r.dgiou);
        for (int j = 0; j < 4; ++j) ga_box(k, j) = (w.w_l1 * a[j] + w.w_giou * b[j]) / n_aux;
      }
      out.seeds.emplace_back(L.aux_logits, std::move(ga_logit));
      out.seeds.emplace_back(L.aux_boxes, std::move(ga_box));
    }
    out.aux.push_back(aux);
  }
  out.total = total_objective(out.obj, out.aux, w);
  return out;
}

TrainState init_stage1(const TrainConfig& cfg, const ModelConfig& model_cfg, const CategorySpace& space,
                       const SplitSpec& split) {
  cfg.validate();
  model_cfg.validate();
  split.validate();
  if (space.d_text() != model_cfg.d_text) throw ShapeError("category space width differs from model d_text");
  TrainConfig c = cfg;
  c.stage = 1;
  return TrainState{c, Detector(model_cfg), AdamW({.weight_decay = c.weight_decay}), space, split, 0};
}

TrainState init_stage2(const TrainState& stage1, const TrainConfig& cfg) {
  cfg.validate();
  if (stage1.model.fusion_enabled()) throw CheckpointMismatch("stage-2 initialization expects a fusion-free model");
  TrainConfig c = cfg;
  c.stage = 2;
  TrainState st{c, stage1.model, AdamW({.weight_decay = c.weight_decay}), stage1.space, stage1.split, 0};
  st.model.enable_fusion(stage1.model.config().seed);
  return st;
}

StepStats train_step(TrainState& st, const std::vector<Scene>& data) {
  if (data.empty()) throw ValidationError("training set is empty");
  const TrainConfig& cfg = st.config;
  const std::uint64_t base = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(cfg.stage)),
                                         static_cast<std::uint64_t>(st.iteration));
  Rng pick(base);
  std::vector<const Scene*> batch;
  for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(&data[pick.below(data.size())]);

  std::vector<ImageTargets> targets;
  std::vector<double> ious;
  for (std::size_t b = 0; b < batch.size(); ++b) {
    Rng rng(derive_seed(base, b + 1));
    targets.push_back(make_targets(*batch[b], st.space, st.split.train_combos, cfg, rng));
    for (const auto& s : targets.back().samples) ious.push_back(s.initial_iou);
  }

  StepStats stats;
  stats.iteration = st.iteration;
  stats.lr = learning_rate(cfg, st.iteration);
  std::optional<double> normalizer;
  if (cfg.use_aux && cfg.use_dwcl && !ious.empty()) {
    try {
      normalizer = mean_difficulty(ious);
    } catch (const DegenerateBatch&) {
      normalizer = 0.0;  // image_objective falls back to plain focal
      stats.dwcl_skipped = true;
    }
  }

  ParameterStore& params = st.model.params();
  params.zero_grad();
  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const int nq = std::min(st.model.config().num_object_queries, st.model.config().num_tokens());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    ad::Tape tape;
    const auto block = DecoderQueryBlock::make(nq, targets[b].samples);
    const ForwardOutput fo = st.model.forward(tape, batch[b]->image, targets[b].prompts.embeddings, block);
    const ImageObjective obj = image_objective(fo, targets[b], cfg, normalizer);
    if (!std::isfinite(obj.total)) throw NonFiniteLoss("objective is not finite at iteration " + std::to_string(st.iteration));
    tape.backward(obj.seeds);
    params.accumulate_grads(tape, inv_b);
    for (const auto& t : obj.obj) {
      stats.obj.cls += t.cls * inv_b;
      stats.obj.l1 += t.l1 * inv_b;
      stats.obj.giou += t.giou * inv_b;
    }
    for (const auto& t : obj.aux) {
      stats.aux.cls += t.cls * inv_b;
      stats.aux.l1 += t.l1 * inv_b;
      stats.aux.giou += t.giou * inv_b;
    }
  }
  stats.total = weighted(stats.obj, cfg.weights) + weighted(stats.aux, cfg.weights);

  stats.grad_norm = params.grad_norm();
  if (!std::isfinite(stats.grad_norm)) throw NonFiniteLoss("gradient norm is not finite");
  if (cfg.grad_clip > 0 && stats.grad_norm > cfg.grad_clip) {
    const double s = cfg.grad_clip / stats.grad_norm;
    for (auto& [_, p] : params.all()) p.grad *= s;
  }
  st.optimizer.step(params, stats.lr);
  ++st.iteration;
  return stats;
}

std::string metrics_header() {
  return "iteration,lr,total,obj_cls,obj_l1,obj_giou,aux_cls,aux_l1,aux_giou,grad_norm";
}

std::string metrics_row(const StepStats& s) {
  char buf[512];
  std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", s.iteration,
                s.lr, s.total, s.obj.cls, s.obj.l1, s.obj.giou, s.aux.cls, s.aux.l1, s.aux.giou, s.grad_norm);
  return buf;
}

std::vector<StepStats> run_training(TrainState& st, const std::vector<Scene>& data, const RunOptions& opts) {
  std::vector<StepStats> out;
  const int end = opts.stop_after >= 0 ? std::min(opts.stop_after, st.config.iterations) : st.config.iterations;
  while (st.iteration < end) {
    out.push_back(train_step(st, data));
    if (opts.metrics) *opts.metrics << metrics_row(out.back()) << '\n';
    if (opts.on_step) opts.on_step(out.back());
    if (!opts.checkpoint_path.empty() && opts.checkpoint_every > 0 && st.iteration % opts.checkpoint_every == 0)
      save_state(opts.checkpoint_path, st);
  }
  if (!opts.checkpoint_path.empty()) save_state(opts.checkpoint_path, st);
  return out;
}

void save_state(const std::filesystem::path& path, const TrainState& st) {
  Archive a;
  a.meta = {{"kind", "train_state"},
            {"stage", st.config.stage},
            {"iteration", st.iteration},
            {"adam_steps", st.optimizer.steps()},
            {"fusion", st.model.fusion_enabled()},
            {"model_config", to_json(st.model.config())},
            {"train_config", to_json(st.config)},
            {"split", to_json(st.split)}};
  store_space(a, st.space);
  store_params(a, st.model.params());
  for (const auto& [n, m] : st.optimizer.first_moments()) a.tensors["adam.m/" + n] = m;
  for (const auto& [n, v] : st.optimizer.second_moments()) a.tensors["adam.v/" + n] = v;
  write_archive(path, a);
}

TrainState load_state(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (a.meta.value("kind", "") != "train_state") throw CheckpointMismatch("'" + path.string() + "' is not a training checkpoint");
  const ModelConfig mc = model_config_from_json(a.meta.at("model_config"));
  const TrainConfig tc = train_config_from_json(a.meta.at("train_config"));
  TrainState st{tc, Detector(mc), AdamW({.weight_decay = tc.weight_decay}), load_space(a),
                split_from_json(a.meta.at("split")), a.meta.at("iteration").get<int>()};
  if (a.meta.at("fusion").get<bool>()) st.model.enable_fusion(mc.seed);
  load_params(a, st.model.params());
  for (const auto& [key, m] : a.tensors) {
    if (key.rfind("adam.m/", 0) == 0) st.optimizer.first_moments()[key.substr(7)] = m;
    if (key.rfind("adam.v/", 0) == 0) st.optimizer.second_moments()[key.substr(7)] = m;
  }
  st.optimizer.set_steps(a.meta.at("adam_steps").get<std::int64_t>());
  return st;
}

}  // namespace aligndet
