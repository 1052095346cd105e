// aligndet: command-line front end.
//
//   aligndet gen-data --split train --count 2000 --seed 11 --out train.jsonl
//   aligndet train --stage 1 --data train.jsonl --out stage1.ckpt
//   aligndet train --stage 2 --init-from stage1.ckpt --data train.jsonl --out stage2.ckpt
//   aligndet eval --checkpoint stage2.ckpt --data heldout.jsonl
//   aligndet ablate --config configs/ablation.json --out ablation.csv
//   aligndet losscurve --out-dir curves
//   aligndet gradcheck --scope model
//   aligndet inspect --checkpoint stage1.ckpt
//
// Relative output paths resolve against $ALIGNDET_OUT_DIR when it is set.
// Exit codes: 0 ok, 1 invalid input, 2 runtime failure, 3 failed check.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "aligndet/ablation.hpp"
#include "aligndet/checkpoint.hpp"
#include "aligndet/errors.hpp"
#include "aligndet/evaluator.hpp"
#include "aligndet/gradcheck.hpp"
#include "aligndet/losses.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace aligndet;

namespace {

std::string g_invocation;

fs::path out_path(const fs::path& p) {
  const char* dir = std::getenv("ALIGNDET_OUT_DIR");
  if (p.is_absolute() || !dir || !*dir) return p;
  fs::create_directories(dir);
  return fs::path(dir) / p;
}

fs::path in_path(const fs::path& p) {
  if (p.is_absolute() || fs::exists(p)) return p;
  const char* dir = std::getenv("ALIGNDET_OUT_DIR");
  if (dir && *dir && fs::exists(fs::path(dir) / p)) return fs::path(dir) / p;
  return p;
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw IoError("cannot open '" + p.string() + "' for writing");
  return os;
}

std::string header(std::uint64_t seed) {
  return "# " + g_invocation + "\n# seed: " + std::to_string(seed) + "\n";
}

// Config file: {"model": {...}, "space": {...}, "data": {...}, "train": {...}, "stage2": {...}}
struct DataConfig {
  int train_count = 2000;
  int heldout_count = 200;
  std::uint64_t train_seed = 11;
  std::uint64_t heldout_seed = 13;
};

struct FileConfig {
  ModelConfig model;
  std::uint64_t space_seed = 7;
  DataConfig data;
  TrainConfig train;
  TrainConfig stage2;
};

FileConfig default_file_config() {
  FileConfig c;
  c.train.iterations = 4000;
  c.train.batch_size = 8;
  c.train.lr = 3e-4;
  c.stage2 = c.train;
  c.stage2.stage = 2;
  c.stage2.iterations = 1000;
  c.stage2.lr = 1e-4;
  return c;
}

FileConfig load_file_config(const std::string& path) {
  FileConfig c = default_file_config();
  if (path.empty()) return c;
  std::ifstream is(in_path(path));
  if (!is) throw ValidationError("cannot read config '" + path + "'");
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ValidationError("config '" + path + "': " + e.what());
  }
  for (const auto& [k, _] : j.items())
    if (k != "model" && k != "space" && k != "data" && k != "train" && k != "stage2")
      throw ValidationError("unknown config section '" + k + "'");
  if (j.contains("model")) {
    const json ref = to_json(c.model);
    for (const auto& [k, _] : j["model"].items())
      if (!ref.contains(k)) throw ValidationError("unknown key 'model." + k + "'");
    json merged = ref;
    merged.update(j["model"]);
    c.model = model_config_from_json(merged);
  }
  auto only = [&](const char* section, std::initializer_list<const char*> keys) {
    if (!j.contains(section)) return;
    for (const auto& [k, _] : j[section].items())
      if (std::find_if(keys.begin(), keys.end(), [&](const char* n) { return k == n; }) == keys.end())
        throw ValidationError(std::string("unknown key '") + section + "." + k + "'");
  };
  only("space", {"seed"});
  only("data", {"train_count", "heldout_count", "train_seed", "heldout_seed"});
  if (j.contains("space")) c.space_seed = j["space"].value("seed", c.space_seed);
  if (j.contains("data")) {
    const json& d = j["data"];
    c.data.train_count = d.value("train_count", c.data.train_count);
    c.data.heldout_count = d.value("heldout_count", c.data.heldout_count);
    c.data.train_seed = d.value("train_seed", c.data.train_seed);
    c.data.heldout_seed = d.value("heldout_seed", c.data.heldout_seed);
  }
  auto merge = [](const TrainConfig& base, const json& over) {
    json merged = to_json(base);
    merged.merge_patch(over);
    return train_config_from_json(merged);
  };
  if (j.contains("train")) c.train = merge(c.train, j["train"]);
  if (j.contains("stage2")) c.stage2 = merge(c.stage2, j["stage2"]);
  c.model.validate();
  return c;
}

/// Flag overrides shared by train and ablate; flags win over the config file.
struct TrainFlags {
  std::optional<int> iterations, batch_size, negatives;
  std::optional<double> lr, weight_decay, lr_drop_fraction, grad_clip, lambda, beta1, beta2;
  std::optional<std::uint64_t> seed;
  bool no_aux = false, no_dwcl = false;

  void add(CLI::App* app, const TrainConfig& d) {
    app->add_option("--iterations", iterations, "optimizer steps")->default_str(std::to_string(d.iterations));
    app->add_option("--batch-size", batch_size, "images per step")->default_str(std::to_string(d.batch_size));
    app->add_option("--lr", lr, "base learning rate")->default_str(CLI::detail::to_string(d.lr));
    app->add_option("--weight-decay", weight_decay, "decoupled weight decay")
        ->default_str(CLI::detail::to_string(d.weight_decay));
    app->add_option("--lr-drop-fraction", lr_drop_fraction, "fraction of the run before the x0.1 drop")
        ->default_str(CLI::detail::to_string(d.lr_drop_fraction));
    app->add_option("--grad-clip", grad_clip, "max global gradient norm (<=0 disables)")
        ->default_str(CLI::detail::to_string(d.grad_clip));
    app->add_option("--lambda", lambda, "noisy box perturbation scale")
        ->default_str(CLI::detail::to_string(d.noise.lambda));
    app->add_option("--beta1", beta1, "DWCL focusing slope")->default_str(CLI::detail::to_string(d.dwcl.beta1));
    app->add_option("--beta2", beta2, "DWCL focusing offset")->default_str(CLI::detail::to_string(d.dwcl.beta2));
    app->add_option("--negatives", negatives, "negative prompts per image")
        ->default_str(std::to_string(d.num_negative_prompts));
    app->add_option("--seed", seed, "training seed")->default_str(std::to_string(d.seed));
    app->add_flag("--no-aux", no_aux, "disable auxiliary (one-to-many) queries");
    app->add_flag("--no-dwcl", no_dwcl, "plain focal loss on auxiliary queries");
  }

  TrainConfig apply(TrainConfig c) const {
    if (iterations) c.iterations = *iterations;
    if (batch_size) c.batch_size = *batch_size;
    if (negatives) c.num_negative_prompts = *negatives;
    if (lr) c.lr = *lr;
    if (weight_decay) c.weight_decay = *weight_decay;
    if (lr_drop_fraction) c.lr_drop_fraction = *lr_drop_fraction;
    if (grad_clip) c.grad_clip = *grad_clip;
    if (lambda) c.noise.lambda = *lambda;
    if (beta1) c.dwcl.beta1 = *beta1;
    if (beta2) c.dwcl.beta2 = *beta2;
    if (seed) c.seed = *seed;
    if (no_aux) c.use_aux = false;
    if (no_dwcl) c.use_dwcl = false;
    c.validate();
    return c;
  }
};

std::vector<Scene> load_or_generate(const std::string& path, SplitKind kind, int count, std::uint64_t seed) {
  if (!path.empty()) return read_dataset(in_path(path));
  return generate_scenes(SplitSpec::default_split(), kind, count, seed);
}

std::string fmt(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.6f", v);
  return b;
}

std::string eval_report(const EvalResult& r, const std::string& protocol) {
  std::ostringstream os;
  os << "protocol: " << protocol << "\nimages: " << r.num_images << "\nground_truth: " << r.num_gt
     << "\nmAP: " << fmt(r.map) << "\nmAP50: " << fmt(r.map50) << "\nmAP75: " << fmt(r.map75) << "\n";
  for (std::size_t c = 0; c < r.categories.size(); ++c)
    os << "AP[" << r.categories[c].name() << "]: " << (r.ap[c] ? fmt(*r.ap[c]) : "n/a") << "\n";
  return os.str();
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 0; i < argc; ++i) g_invocation += (i ? " " : "") + std::string(i ? argv[i] : "aligndet");

  CLI::App app{"aligndet: desk-scale open-vocabulary detector with one-to-many alignment training"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  const FileConfig defaults = default_file_config();

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "render a synthetic scene dataset");
  std::string gen_split = "train", gen_out = "train.jsonl";
  int gen_count = 2000;
  std::uint64_t gen_seed = 11;
  RenderConfig rc;
  gen->add_option("--split", gen_split, "train or heldout category combinations")
      ->check(CLI::IsMember({"train", "heldout"}));
  gen->add_option("--count", gen_count, "number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--seed", gen_seed, "master seed; scene i uses a seed derived from it and i");
  gen->add_option("--min-objects", rc.min_objects, "objects per scene, lower bound");
  gen->add_option("--max-objects", rc.max_objects, "objects per scene, upper bound");
  gen->add_option("--out", gen_out, "output dataset path");

  // train
  auto* train = app.add_subcommand("train", "run one training stage");
  std::string tr_config, tr_data, tr_init, tr_resume, tr_out = "stage1.ckpt", tr_metrics;
  int tr_stage = 1, tr_stop = -1, tr_ckpt_every = 0;
  TrainFlags tr_flags;
  train->add_option("--config", tr_config, "JSON config file (flags override it)");
  train->add_option("--stage", tr_stage, "1: detector; 2: add fusion on top of a stage-1 checkpoint")
      ->check(CLI::IsMember({1, 2}));
  train->add_option("--data", tr_data, "training dataset (default: generated from the config's data section)");
  train->add_option("--init-from", tr_init, "stage-1 checkpoint (required for --stage 2)");
  train->add_option("--resume", tr_resume, "continue an interrupted run from its checkpoint");
  train->add_option("--stop-after", tr_stop, "stop after this many completed steps (-1: run to the end)");
  train->add_option("--checkpoint-every", tr_ckpt_every, "also save every N steps (0: only at the end)");
  train->add_option("--out", tr_out, "checkpoint path");
  train->add_option("--metrics", tr_metrics, "per-step metrics CSV (default: <out>.metrics.csv)");
  tr_flags.add(train, defaults.train);

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_protocol = "zero-shot", ev_out, ev_csv;
  int ev_max = 100;
  eval->add_option("--checkpoint", ev_ckpt, "checkpoint to evaluate")->required();
  eval->add_option("--data", ev_data, "dataset (default: generated held-out or train-combo scenes)");
  eval->add_option("--protocol", ev_protocol, "zero-shot (held-out combos) or train-combos")
      ->check(CLI::IsMember({"zero-shot", "train-combos"}));
  eval->add_option("--max-dets", ev_max, "detections kept per image");
  eval->add_option("--out", ev_out, "text report path (default: stdout only)");
  eval->add_option("--csv", ev_csv, "append-free single-row CSV path");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "component ablation or beta sweep over seeds");
  std::string ab_config, ab_train, ab_heldout, ab_out = "ablation.csv", ab_table = "components";
  std::vector<std::uint64_t> ab_seeds{0, 1, 2};
  std::optional<int> ab_stage2_iters;
  TrainFlags ab_flags;
  ablate->add_option("--config", ab_config, "JSON config file (flags override it)");
  ablate->add_option("--train-data", ab_train, "training dataset (default: generated)");
  ablate->add_option("--heldout-data", ab_heldout, "held-out dataset (default: generated)");
  ablate->add_option("--seeds", ab_seeds, "seeds per cell")->delimiter(',');
  ablate->add_option("--table", ab_table, "components (4 rows) or betas (focal vs DWCL beta grid)")
      ->check(CLI::IsMember({"components", "betas"}));
  ablate->add_option("--stage2-iterations", ab_stage2_iters, "fusion fine-tuning steps")
      ->default_str(std::to_string(defaults.stage2.iterations));
  ablate->add_option("--out", ab_out, "CSV path");
  ab_flags.add(ablate, defaults.train);

  // losscurve
  auto* curve = app.add_subcommand("losscurve", "focal vs DWCL positive-loss curve and surface");
  std::string lc_dir = "curves";
  int lc_points = 1000, lc_iou_points = 20;
  double lc_iou = 0.5, lc_norm = 0.25;
  DwclParams lc_dwcl;
  FocalParams lc_focal;
  curve->add_option("--out-dir", lc_dir, "directory for loss_curve.csv and loss_surface.csv");
  curve->add_option("--points", lc_points, "p grid is k/points for k = 1..points-1");
  curve->add_option("--iou-points", lc_iou_points, "surface IoU grid is k/iou-points for k = 0..iou-points-1");
  curve->add_option("--iou", lc_iou, "IoU of the curve")->check(CLI::Range(0.0, 1.0));
  curve->add_option("--normalizer", lc_norm, "fixed mean difficulty E[1 - IoU]");
  curve->add_option("--beta1", lc_dwcl.beta1, "DWCL focusing slope");
  curve->add_option("--beta2", lc_dwcl.beta2, "DWCL focusing offset");
  curve->add_option("--alpha", lc_focal.alpha, "focal alpha");
  curve->add_option("--gamma", lc_focal.gamma, "focal gamma");

  // gradcheck
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  GradcheckOptions gc;
  std::string gc_out;
  grad->add_option("--scope", gc.scope, "suite")->check(CLI::IsMember({"losses", "fusion", "model"}));
  grad->add_option("--seed", gc.seed, "sampling seed");
  grad->add_option("--samples", gc.samples, "inputs / entries per tensor / parameters (0: suite default)");
  grad->add_option("--floor", gc.floor, "relative-error denominator floor");
  grad->add_option("--out", gc_out, "report path (default: stdout only)");

  // inspect
  auto* inspect = app.add_subcommand("inspect", "print a checkpoint's manifest, config and split");
  std::string in_ckpt;
  inspect->add_option("--checkpoint", in_ckpt, "checkpoint path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*gen) {
      const SplitKind kind = gen_split == "train" ? SplitKind::train : SplitKind::heldout;
      if (rc.min_objects < 1 || rc.max_objects < rc.min_objects)
        throw ValidationError("--min-objects/--max-objects must satisfy 1 <= min <= max");
      const auto scenes = generate_scenes(SplitSpec::default_split(), kind, gen_count, gen_seed, rc);
      const fs::path p = out_path(gen_out);
      if (p.has_parent_path()) fs::create_directories(p.parent_path());
      write_dataset(scenes, p, g_invocation + " (seed " + std::to_string(gen_seed) + ")");
      std::cout << "wrote " << scenes.size() << " scenes to " << p.string() << "\n";
    } else if (*train) {
      const FileConfig fc = load_file_config(tr_config);
      std::optional<TrainState> st;
      if (!tr_resume.empty()) {
        st.emplace(load_state(in_path(tr_resume)));
        if (tr_flags.iterations) st->config.iterations = *tr_flags.iterations;
      } else if (tr_stage == 2) {
        if (tr_init.empty()) throw ValidationError("--stage 2 requires --init-from <stage-1 checkpoint>");
        const TrainState s1 = load_state(in_path(tr_init));
        TrainConfig tc = fc.stage2;
        tc.stage = 2;
        st.emplace(init_stage2(s1, tr_flags.apply(tc)));
      } else {
        if (!tr_init.empty()) throw ValidationError("--init-from is only valid with --stage 2");
        TrainConfig tc = fc.train;
        tc.stage = 1;
        const ModelConfig mc = fc.model;
        st.emplace(init_stage1(tr_flags.apply(tc), mc,
                               CategorySpace::default_space(fc.space_seed, mc.d_text), SplitSpec::default_split()));
      }
      const auto data = load_or_generate(tr_data, SplitKind::train, fc.data.train_count, fc.data.train_seed);
      const fs::path ckpt = out_path(tr_out);
      const fs::path metrics = tr_metrics.empty() ? fs::path(ckpt.string() + ".metrics.csv") : out_path(tr_metrics);
      const bool append = !tr_resume.empty() && fs::exists(metrics);
      if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
      std::ofstream ms(metrics, append ? std::ios::app : std::ios::trunc);
      if (!ms) throw IoError("cannot open '" + metrics.string() + "'");
      if (!append) ms << header(st->config.seed) << metrics_header() << "\n";
      RunOptions ro;
      ro.stop_after = tr_stop;
      ro.metrics = &ms;
      ro.checkpoint_path = ckpt;
      ro.checkpoint_every = tr_ckpt_every;
      const int total = st->config.iterations;
      ro.on_step = [&](const StepStats& s) {
        if ((s.iteration + 1) % 100 == 0 || s.iteration + 1 == total)
          std::cerr << "step " << s.iteration + 1 << "/" << total << " loss " << fmt(s.total) << "\n";
      };
      run_training(*st, data, ro);
      std::cout << "stage " << st->config.stage << ": " << st->iteration << "/" << total << " steps, checkpoint "
                << ckpt.string() << ", metrics " << metrics.string() << "\n";
    } else if (*eval) {
      const TrainState st = load_state(in_path(ev_ckpt));
      const bool zs = ev_protocol == "zero-shot";
      const FileConfig fc = default_file_config();
      const auto scenes = load_or_generate(ev_data, zs ? SplitKind::heldout : SplitKind::train,
                                           fc.data.heldout_count, zs ? fc.data.heldout_seed : fc.data.heldout_seed + 1);
      const EvalResult r = zs ? zero_shot_eval(st.model, st.space, st.split, scenes, ev_max)
                              : evaluate_model(st.model, st.space, scenes, st.split.train_combos, ev_max);
      const std::string report = eval_report(r, ev_protocol) + "fusion: " + (st.model.fusion_enabled() ? "on" : "off") + "\n";
      std::cout << report;
      if (!ev_out.empty()) open_out(out_path(ev_out)) << header(st.config.seed) << report;
      if (!ev_csv.empty())
        open_out(out_path(ev_csv)) << header(st.config.seed)
                                   << "checkpoint,protocol,map,map50,map75,num_images,num_gt\n"
                                   << ev_ckpt << "," << ev_protocol << "," << fmt(r.map) << "," << fmt(r.map50)
                                   << "," << fmt(r.map75) << "," << r.num_images << "," << r.num_gt << "\n";
    } else if (*ablate) {
      const FileConfig fc = load_file_config(ab_config);
      AblationConfig ac;
      ac.model = fc.model;
      ac.stage1 = ab_flags.apply(fc.train);
      ac.stage2 = fc.stage2;
      if (ab_stage2_iters) ac.stage2.iterations = *ab_stage2_iters;
      ac.stage2.validate();
      ac.seeds = ab_seeds;
      if (ac.seeds.empty()) throw ValidationError("--seeds must list at least one seed");
      const auto space = CategorySpace::default_space(fc.space_seed, fc.model.d_text);
      const auto split = SplitSpec::default_split();
      const auto tr = load_or_generate(ab_train, SplitKind::train, fc.data.train_count, fc.data.train_seed);
      const auto ho = load_or_generate(ab_heldout, SplitKind::heldout, fc.data.heldout_count, fc.data.heldout_seed);
      const AblationLog log = [](const std::string& m) { std::cerr << m << "\n"; };
      std::vector<AblationRow> rows;
      if (ab_table == "components") {
        rows = run_ablation(ac, tr, ho, space, split, log);
      } else {
        rows = run_beta_sweep(ac, {{1, 1.5}, {1, 2}, {1, 2.5}, {2, 1}, {2, 1.5}, {2, 2}}, tr, ho, space, split, log);
      }
      const std::string csv = ablation_csv(rows);
      open_out(out_path(ab_out)) << header(ac.stage1.seed) << csv;
      std::cout << csv;
      for (const auto& r : rows)
        if (!r.error.empty()) return 2;
    } else if (*curve) {
      lc_dwcl.focal_neg = lc_focal;
      const auto ps = open_unit_grid(lc_points);
      const double one[] = {lc_iou};
      std::vector<double> ious;
      for (int k = 0; k < lc_iou_points; ++k) ious.push_back(static_cast<double>(k) / lc_iou_points);
      const fs::path dir = out_path(lc_dir);
      fs::create_directories(dir);
      auto fmt17 = [](double v) {
        char b[40];
        std::snprintf(b, sizeof b, "%.10g", v);
        return std::string(b);
      };
      {
        std::ofstream os = open_out(dir / "loss_curve.csv");
        os << header(0) << "# iou=" << fmt17(lc_iou) << " normalizer=" << fmt17(lc_norm) << "\np,focal,dwcl\n";
        for (const auto& c : loss_curves(ps, one, lc_focal, lc_dwcl, lc_norm))
          os << fmt17(c.p) << "," << fmt17(c.focal) << "," << fmt17(c.dwcl) << "\n";
      }
      {
        std::ofstream os = open_out(dir / "loss_surface.csv");
        os << header(0) << "# normalizer=" << fmt17(lc_norm) << "\np,iou,dwcl\n";
        for (const auto& c : loss_curves(open_unit_grid(std::min(lc_points, 100)), ious, lc_focal, lc_dwcl, lc_norm))
          os << fmt17(c.p) << "," << fmt17(c.iou) << "," << fmt17(c.dwcl) << "\n";
      }
      std::cout << "wrote " << (dir / "loss_curve.csv").string() << " and " << (dir / "loss_surface.csv").string() << "\n";
    } else if (*grad) {
      const GradcheckReport r = run_gradcheck(gc);
      std::cout << r.to_text();
      if (!gc_out.empty()) open_out(out_path(gc_out)) << header(gc.seed) << r.to_text();
      return r.pass() ? 0 : 3;
    } else if (*inspect) {
      const json h = read_archive_header(in_path(in_ckpt));
      std::cout << "format_version: " << h.at("format_version") << "\n";
      const json& meta = h.at("meta");
      for (const char* k : {"kind", "stage", "iteration", "fusion"})
        if (meta.contains(k)) std::cout << k << ": " << meta.at(k).dump() << "\n";
      for (const char* k : {"model_config", "train_config", "split", "category_space"})
        if (meta.contains(k)) std::cout << k << ": " << meta.at(k).dump(2) << "\n";
      std::cout << "tensors:\n";
      for (const auto& t : h.at("tensors"))
        std::cout << "  " << t.at("name").get<std::string>() << " " << t.at("rows") << "x" << t.at("cols")
                  << " @" << t.at("offset") << "\n";
    }
  } catch (const ValidationError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << e.what() << "\n";
    return 2;
  }
  return 0;
}
