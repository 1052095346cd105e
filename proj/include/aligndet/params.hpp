#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "aligndet/autograd.hpp"
#include "aligndet/rng.hpp"

namespace aligndet {

/// Named trainable tensors in a deterministic (lexicographic) order.
class ParameterStore {
 public:
  ad::Parameter& add(const std::string& name, ad::Matrix init);
  ad::Parameter& at(const std::string& name);
  const ad::Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.contains(name); }

  std::map<std::string, ad::Parameter>& all() { return params_; }
  const std::map<std::string, ad::Parameter>& all() const { return params_; }

  void zero_grad();
  /// Adds every parameter gradient recorded on `tape` into `grad`.
  void accumulate_grads(const ad::Tape& tape, double weight = 1.0);
  double grad_norm() const;
  std::size_t num_scalars() const;
  /// 64-bit digest over names and value bytes.
  std::uint64_t fingerprint() const;

 private:
  std::map<std::string, ad::Parameter> params_;
};

/// Glorot-uniform fan_in x fan_out matrix.
ad::Matrix xavier(int fan_in, int fan_out, Rng& rng);
ad::Matrix gaussian(int rows, int cols, double stddev, Rng& rng);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

/// Adam with decoupled weight decay.
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  /// One update of every parameter in `store` using its `grad`.
  void step(ParameterStore& store, double lr);

  std::int64_t steps() const { return t_; }
  std::map<std::string, ad::Matrix>& first_moments() { return m_; }
  std::map<std::string, ad::Matrix>& second_moments() { return v_; }
  const std::map<std::string, ad::Matrix>& first_moments() const { return m_; }
  const std::map<std::string, ad::Matrix>& second_moments() const { return v_; }
  void set_steps(std::int64_t t) { t_ = t; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, ad::Matrix> m_;
  std::map<std::string, ad::Matrix> v_;
};

}  // namespace aligndet
