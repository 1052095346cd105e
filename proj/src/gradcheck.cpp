#include "aligndet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>

#include "aligndet/errors.hpp"
#include "aligndet/fusion.hpp"
#include "aligndet/losses.hpp"
#include "aligndet/rng.hpp"
#include "aligndet/scenes.hpp"
#include "aligndet/trainer.hpp"

namespace aligndet {

double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

bool GradcheckReport::pass() const {
  return std::all_of(groups.begin(), groups.end(), [](const auto& g) { return g.pass(); });
}

std::string GradcheckReport::to_text() const {
  std::string out = "gradcheck scope=" + scope + "\n";
  char buf[256];
  for (const auto& g : groups) {
    std::snprintf(buf, sizeof buf, "%-12s checked=%-5d worst_rel_err=%.3e tol=%.0e %s worst_at=%s\n",
                  g.name.c_str(), g.checked, g.worst, g.tolerance, g.pass() ? "PASS" : "FAIL",
                  g.worst_tensor.c_str());
    out += buf;
  }
  out += pass() ? "result PASS\n" : "result FAIL\n";
  return out;
}

namespace {

struct Tracker {
  std::map<std::string, GradcheckGroup> groups;
  const GradcheckOptions& opts;

  void add(const std::string& group, const std::string& tensor, double analytic, double numeric,
           double tol) {
    if (tensor == opts.corrupt) analytic *= opts.corrupt_factor;
    auto& g = groups[group];
    g.name = group;
    g.tolerance = tol;
    ++g.checked;
    const double e = relative_error(analytic, numeric, opts.floor);
    if (e > g.worst || g.worst_tensor.empty()) {
      g.worst = e;
      g.worst_tensor = tensor;
    }
  }

  GradcheckReport report(const std::string& scope) const {
    GradcheckReport r{scope, {}};
    for (const auto& [_, g] : groups) r.groups.push_back(g);
    return r;
  }
};

double central(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2 * h);
}

GradcheckReport check_losses(const GradcheckOptions& opts) {
  constexpr double h = 1e-6, tol = 1e-4;
  const int n = opts.samples > 0 ? opts.samples : 1000;
  Rng rng(derive_seed(opts.seed, 0x1055));
  Tracker t{{}, opts};

  for (int i = 0; i < n; ++i) {
    const double p = rng.uniform(0.01, 0.99);
    const int y = static_cast<int>(rng.below(2));
    const FocalParams fp{rng.uniform(0.05, 0.95), rng.uniform(0.0, 4.0)};
    const double a = focal_loss(p, y, fp).dloss_dp;
    const double num = central([&](double x) { return focal_loss(x, y, fp).loss; }, p, h);
    t.add("focal", "focal", a, num, tol);
  }

  for (int i = 0; i < n; ++i) {
    DwclBatch b;
    const int m = 2 + static_cast<int>(rng.below(7));
    for (int k = 0; k < m; ++k) {
      b.probs.push_back(rng.uniform(0.01, 0.99));
      b.labels.push_back(k == 0 ? 1 : static_cast<int>(rng.below(2)));
      b.initial_ious.push_back(rng.uniform(0.5, 0.99));
    }
    const DwclParams dp{rng.uniform(0.0, 2.0), rng.uniform(0.5, 3.0), {0.25, 2.0}};
    const DwclResult r = dwcl_loss(b, dp);
    const auto k = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(m)));
    const double num = central(
        [&](double x) {
          DwclBatch c = b;
          c.probs[k] = x;
          return dwcl_loss(c, dp).total;
        },
        b.probs[k], h);
    t.add("dwcl", "dwcl", r.dloss_dp[k], num, tol);
  }

  auto random_box = [&] {
    const double cx = rng.uniform(0.2, 0.8), cy = rng.uniform(0.2, 0.8);
    const double w = rng.uniform(0.05, 0.4), hh = rng.uniform(0.05, 0.4);
    return Boxd{cx - w / 2, cy - hh / 2, cx + w / 2, cy + hh / 2};
  };
  for (int i = 0; i < n; ++i) {
    const Boxd pred = random_box(), target = random_box();
    const BoxLossResult r = box_losses(pred, target);
    const int j = static_cast<int>(rng.below(4));
    auto moved = [&](double x) {
      std::array<double, 4> c{pred.x1, pred.y1, pred.x2, pred.y2};
      c[static_cast<std::size_t>(j)] = x;
      return box_losses(Boxd{c[0], c[1], c[2], c[3]}, target);
    };
    const double x0 = std::array<double, 4>{pred.x1, pred.y1, pred.x2, pred.y2}[static_cast<std::size_t>(j)];
    t.add("box_l1", "box_l1", r.dl1[static_cast<std::size_t>(j)],
          central([&](double x) { return moved(x).l1; }, x0, h), tol);
    t.add("box_giou", "box_giou", r.dgiou[static_cast<std::size_t>(j)],
          central([&](double x) { return moved(x).giou_loss; }, x0, h), tol);
  }
  return t.report("losses");
}

/// Checks sampled entries of `tensor` against central differences of `f`.
void check_tensor(Tracker& t, const std::string& group, const std::string& name, ad::Matrix& value,
                  const ad::Matrix& analytic, const std::function<double()>& f, int samples, double h,
                  double tol, Rng& rng) {
  const Eigen::Index total = value.size();
  const int count = static_cast<int>(std::min<Eigen::Index>(samples, total));
  for (int s = 0; s < count; ++s) {
    const Eigen::Index idx =
        count == total ? s : static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(total)));
    double& x = value.data()[idx];
    const double x0 = x;
    x = x0 + h;
    const double fp = f();
    x = x0 - h;
    const double fm = f();
    x = x0;
    t.add(group, name, analytic.data()[idx], (fp - fm) / (2 * h), tol);
  }
}

GradcheckReport check_fusion(const GradcheckOptions& opts) {
  constexpr double h = 1e-5, tol = 1e-4;
  const int per_tensor = opts.samples > 0 ? opts.samples : 50;
  const int d = 16, d_text = 8, tokens = 12, prompts = 5, heads = 4;
  Rng rng(derive_seed(opts.seed, 0xf5));
  ParameterStore store;
  fusion::add_parameters(store, d_text, d, derive_seed(opts.seed, 1));
  for (auto& [_, p] : store.all()) p.value = gaussian(static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()), 0.5, rng);
  ad::Matrix image = gaussian(tokens, d, 1.0, rng);
  ad::Matrix text = gaussian(prompts, d_text, 1.0, rng);
  const ad::Matrix R = gaussian(tokens, d, 1.0, rng) / double(tokens * d);

  auto objective = [&] {
    ad::Tape tape(false);
    const ad::Var out = fusion::fuse(tape, tape.constant(image), tape.constant(text), store, heads);
    return (out.value().array() * R.array()).sum();
  };

  ad::Parameter ip{image, {}}, tp{text, {}};
  ad::Tape tape;
  const ad::Var out = fusion::fuse(tape, tape.param(ip), tape.param(tp), store, heads);
  tape.backward({{out, R}});

  Tracker t{{}, opts};
  for (auto& [name, p] : store.all()) {
    const ad::Matrix* g = tape.grad_of(p);
    const ad::Matrix analytic = g ? *g : ad::Matrix::Zero(p.value.rows(), p.value.cols());
    check_tensor(t, "fusion", name, p.value, analytic, objective, per_tensor, h, tol, rng);
  }
  check_tensor(t, "fusion.input", "image_tokens", image, *tape.grad_of(ip), objective, per_tensor, h, tol, rng);
  check_tensor(t, "fusion.input", "text", text, *tape.grad_of(tp), objective, per_tensor, h, tol, rng);
  return t.report("fusion");
}

GradcheckReport check_model(const GradcheckOptions& opts) {
  constexpr double h = 1e-5, tol = 1e-3;
  const int samples = opts.samples > 0 ? opts.samples : 200;
  Rng rng(derive_seed(opts.seed, 0x30de1));

  ModelConfig mc;
  mc.hidden_dim = 32;
  mc.ffn_dim = 64;
  mc.num_object_queries = 8;
  mc.seed = derive_seed(opts.seed, 2);
  Detector model(mc);
  model.enable_fusion(mc.seed);
  // Zero-initialized tensors would hide the gradients of everything upstream.
  for (const char* n : {"fusion.attn.wo", "enc.box.l2.w", "dec.box.l2.w"})
    if (model.params().contains(n)) {
      auto& p = model.params().at(n);
      p.value = gaussian(static_cast<int>(p.value.rows()), static_cast<int>(p.value.cols()), 0.1, rng);
    }

  const SplitSpec split = SplitSpec::default_split();
  const CategorySpace space = CategorySpace::default_space(7, mc.d_text);
  RenderConfig rc;
  rc.min_objects = 2;
  rc.max_objects = 3;
  const Scene scene = render_scene(split, SplitKind::train, derive_seed(opts.seed, 3), 0, rc);
  TrainConfig cfg;
  cfg.num_negative_prompts = 3;
  Rng trng(derive_seed(opts.seed, 4));
  const ImageTargets targets = make_targets(scene, space, split.train_combos, cfg, trng);
  const auto block = DecoderQueryBlock::make(mc.num_object_queries, targets.samples);

  ad::Tape tape;
  const ForwardOutput fo = model.forward(tape, scene.image, targets.prompts.embeddings, block);
  const ImageObjective obj = image_objective(fo, targets, cfg);
  tape.backward(obj.seeds);
  const std::vector<int> selection = fo.selected;
  const std::vector<Assignment> matches = obj.matches;

  auto objective = [&] {
    ad::Tape t(false);
    const ForwardOutput o = model.forward(t, scene.image, targets.prompts.embeddings, block, &selection);
    return image_objective(o, targets, cfg, {}, &matches).total;
  };

  std::vector<std::string> names;
  for (const auto& [n, _] : model.params().all()) names.push_back(n);
  std::map<std::string, ad::Matrix> analytic;
  for (const auto& n : names) {
    const ad::Matrix* g = tape.grad_of(model.params().at(n));
    analytic[n] = g ? *g : ad::Matrix::Zero(model.params().at(n).value.rows(), model.params().at(n).value.cols());
  }

  Tracker t{{}, opts};
  for (int s = 0; s < samples; ++s) {
    const std::string& n = names[rng.below(names.size())];
    ad::Matrix& value = model.params().at(n).value;
    const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(value.size())));
    double& x = value.data()[idx];
    const double x0 = x;
    x = x0 + h;
    const double fp = objective();
    x = x0 - h;
    const double fm = objective();
    x = x0;
    const std::string group = "model." + n.substr(0, n.find('.'));
    t.add(group, n, analytic[n].data()[idx], (fp - fm) / (2 * h), tol);
  }
  return t.report("model");
}

}  // namespace

GradcheckReport run_gradcheck(const GradcheckOptions& opts) {
  if (opts.scope == "losses") return check_losses(opts);
  if (opts.scope == "fusion") return check_fusion(opts);
  if (opts.scope == "model") return check_model(opts);
  throw ValidationError("gradcheck scope must be losses, fusion or model, not '" + opts.scope + "'");
}

}  // namespace aligndet
