#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace aligndet {

/// |a - n| / max(|a|, |n|, floor). The floor keeps near-zero gradients from
/// turning finite-difference rounding noise into large relative errors.
double relative_error(double analytic, double numeric, double floor);

struct GradcheckOptions {
  std::string scope = "losses";  ///< losses | fusion | model
  std::uint64_t seed = 0;
  /// Inputs for the loss suite, sampled parameters for the model suite.
  int samples = 0;  ///< 0 picks the scope default (1000 / 50 per tensor / 200)
  double floor = 1e-6;
  /// Negative control: scales the analytic gradient of this tensor (or loss
  /// term) before comparison.
  std::string corrupt;
  double corrupt_factor = 1.5;
};

struct GradcheckGroup {
  std::string name;
  int checked = 0;
  double worst = 0;          ///< worst relative error
  std::string worst_tensor;  ///< where it occurred
  double tolerance = 0;

  bool pass() const { return worst < tolerance; }
};

struct GradcheckReport {
  std::string scope;
  std::vector<GradcheckGroup> groups;

  bool pass() const;
  /// Fixed-format text, identical for identical options.
  std::string to_text() const;
};

/// losses: focal, DWCL and box-loss derivatives over random inputs, step 1e-6,
///   tolerance 1e-4.
/// fusion: every fusion tensor and both inputs of a downstream scalar,
///   step 1e-5, tolerance 1e-4.
/// model: the full training objective of a random mini-scene w.r.t. randomly
///   sampled parameters, with query selection and matching pinned, step 1e-5,
///   tolerance 1e-3.
GradcheckReport run_gradcheck(const GradcheckOptions& opts);

}  // namespace aligndet
