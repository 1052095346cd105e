#include "aligndet/ablation.hpp"

#include <cmath>
#include <cstdio>
#include <limits>

#include "aligndet/errors.hpp"

namespace aligndet {

namespace {

std::vector<double> finished(const std::vector<double>& v) {
  std::vector<double> out;
  for (double x : v)
    if (std::isfinite(x)) out.push_back(x);
  return out;
}

double sum_sq_dev(const std::vector<double>& v, double mean) {
  double s = 0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s;
}

AblationRow make_row(const std::string& name, bool o2m, bool dwcl, bool fusion, double b1 = 0, double b2 = 0) {
  AblationRow r;
  r.name = name;
  r.o2m = o2m;
  r.dwcl = dwcl;
  r.fusion = fusion;
  r.beta1 = b1;
  r.beta2 = b2;
  return r;
}

std::string fmt(double v) {
  char b[64];
  std::snprintf(b, sizeof b, "%.6f", v);
  return b;
}

}  // namespace

double AblationRow::mean() const {
  const auto v = finished(per_seed);
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double AblationRow::stddev() const {
  const auto v = finished(per_seed);
  if (v.size() < 2) return 0.0;
  return std::sqrt(sum_sq_dev(v, mean()) / static_cast<double>(v.size() - 1));
}

double pooled_stddev(const AblationRow& a, const AblationRow& b) {
  const auto va = finished(a.per_seed), vb = finished(b.per_seed);
  const double dof = static_cast<double>(va.size() + vb.size()) - 2;
  if (dof <= 0) return 0.0;
  return std::sqrt((sum_sq_dev(va, a.mean()) + sum_sq_dev(vb, b.mean())) / dof);
}

std::vector<AblationRow> run_ablation(const AblationConfig& cfg, const std::vector<Scene>& train,
                                      const std::vector<Scene>& heldout, const CategorySpace& space,
                                      const SplitSpec& split, const AblationLog& log) {
  const double b1 = cfg.stage1.dwcl.beta1, b2 = cfg.stage1.dwcl.beta2;
  std::vector<AblationRow> rows{make_row("baseline", false, false, false), make_row("o2m", true, false, false),
                                make_row("o2m+dwcl", true, true, false, b1, b2),
                                make_row("full", true, true, true, b1, b2)};
  const double nan = std::numeric_limits<double>::quiet_NaN();
  auto note = [&](const std::string& m) {
    if (log) log(m);
  };

  for (std::uint64_t seed : cfg.seeds) {
    ModelConfig mc = cfg.model;
    mc.seed = seed;
    std::optional<TrainState> dwcl_state;
    for (std::size_t i = 0; i < 3; ++i) {
      AblationRow& r = rows[i];
      TrainConfig tc = cfg.stage1;
      tc.seed = seed;
      tc.use_aux = r.o2m;
      tc.use_dwcl = r.dwcl;
      try {
        TrainState st = init_stage1(tc, mc, space, split);
        run_training(st, train);
        if (r.dwcl) dwcl_state.emplace(st);
        const double m = zero_shot_eval(st.model, space, split, heldout).map;
        r.per_seed.push_back(m);
        note(r.name + " seed " + std::to_string(seed) + " map " + fmt(m));
      } catch (const std::exception& e) {
        r.per_seed.push_back(nan);
        if (r.error.empty()) r.error = e.what();
        note(r.name + " seed " + std::to_string(seed) + " failed: " + e.what());
      }
    }
    AblationRow& full = rows[3];
    try {
      if (!dwcl_state) throw Error("stage-1 o2m+dwcl run failed; no checkpoint to fine-tune");
      TrainConfig tc = cfg.stage2;
      tc.seed = seed;
      tc.use_aux = true;
      tc.use_dwcl = true;
      TrainState st = init_stage2(*dwcl_state, tc);
      run_training(st, train);
      const double m = zero_shot_eval(st.model, space, split, heldout).map;
      full.per_seed.push_back(m);
      note("full seed " + std::to_string(seed) + " map " + fmt(m));
    } catch (const std::exception& e) {
      full.per_seed.push_back(nan);
      if (full.error.empty()) full.error = e.what();
      note("full seed " + std::to_string(seed) + " failed: " + e.what());
    }
  }
  return rows;
}

std::vector<AblationRow> run_beta_sweep(const AblationConfig& cfg,
                                        const std::vector<std::pair<double, double>>& betas,
                                        const std::vector<Scene>& train,
                                        const std::vector<Scene>& heldout, const CategorySpace& space,
                                        const SplitSpec& split, const AblationLog& log) {
  std::vector<AblationRow> rows;
  rows.push_back(make_row("focal", true, false, false));
  for (auto [b1, b2] : betas) rows.push_back(make_row("dwcl", true, true, false, b1, b2));
  for (std::uint64_t seed : cfg.seeds) {
    ModelConfig mc = cfg.model;
    mc.seed = seed;
    for (auto& r : rows) {
      TrainConfig tc = cfg.stage1;
      tc.seed = seed;
      tc.use_aux = true;
      tc.use_dwcl = r.dwcl;
      tc.dwcl.beta1 = r.beta1;
      tc.dwcl.beta2 = r.beta2;
      try {
        TrainState st = init_stage1(tc, mc, space, split);
        run_training(st, train);
        r.per_seed.push_back(zero_shot_eval(st.model, space, split, heldout).map);
        if (log) log(r.name + " " + fmt(r.beta1) + "/" + fmt(r.beta2) + " seed " + std::to_string(seed) +
                     " map " + fmt(r.per_seed.back()));
      } catch (const std::exception& e) {
        r.per_seed.push_back(std::numeric_limits<double>::quiet_NaN());
        if (r.error.empty()) r.error = e.what();
      }
    }
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "row,o2m,dwcl,fusion,beta1,beta2,map_mean,map_std";
  const std::size_t n = rows.empty() ? 0 : rows.front().per_seed.size();
  for (std::size_t s = 0; s < n; ++s) out += ",seed" + std::to_string(s);
  out += ",error\n";
  for (const auto& r : rows) {
    out += r.name + "," + (r.o2m ? "1" : "0") + "," + (r.dwcl ? "1" : "0") + "," + (r.fusion ? "1" : "0") + "," +
           fmt(r.beta1) + "," + fmt(r.beta2) + "," + fmt(r.mean()) + "," + fmt(r.stddev());
    for (double v : r.per_seed) out += "," + fmt(v);
    std::string err = r.error;
    for (char& c : err)
      if (c == ',' || c == '\n') c = ';';
    out += "," + err + "\n";
  }
  return out;
}

}  // namespace aligndet
