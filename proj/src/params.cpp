#include "aligndet/params.hpp"

#include <cmath>

#include "aligndet/errors.hpp"
#include "aligndet/textspace.hpp"

namespace aligndet {

ad::Parameter& ParameterStore::add(const std::string& name, ad::Matrix init) {
  if (params_.contains(name)) throw ValidationError("duplicate parameter '" + name + "'");
  ad::Parameter& p = params_[name];
  p.value = std::move(init);
  p.zero_grad();
  return p;
}

ad::Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw CheckpointMismatch("unknown parameter '" + name + "'");
  return it->second;
}

const ad::Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw CheckpointMismatch("unknown parameter '" + name + "'");
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

void ParameterStore::accumulate_grads(const ad::Tape& tape, double weight) {
  for (auto& [_, p] : params_)
    if (const ad::Matrix* g = tape.grad_of(p)) p.grad += weight * *g;
}

double ParameterStore::grad_norm() const {
  double s = 0;
  for (const auto& [_, p] : params_) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

std::size_t ParameterStore::num_scalars() const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::uint64_t ParameterStore::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, p] : params_) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(p.value.data(), sizeof(double) * static_cast<std::size_t>(p.value.size()), h);
  }
  return h;
}

ad::Matrix xavier(int fan_in, int fan_out, Rng& rng) {
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  ad::Matrix m(fan_in, fan_out);
  for (int j = 0; j < fan_out; ++j)
    for (int i = 0; i < fan_in; ++i) m(i, j) = rng.uniform(-a, a);
  return m;
}

ad::Matrix gaussian(int rows, int cols, double stddev, Rng& rng) {
  ad::Matrix m(rows, cols);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i) m(i, j) = stddev * rng.normal();
  return m;
}

void AdamW::step(ParameterStore& store, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : store.all()) {
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.size() == 0) {
      m.setZero(p.value.rows(), p.value.cols());
      v.setZero(p.value.rows(), p.value.cols());
    }
    m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * p.grad;
    v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
    if (cfg_.weight_decay != 0.0) p.value *= 1.0 - lr * cfg_.weight_decay;
    p.value.array() -=
        lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg_.eps);
  }
}

}  // namespace aligndet
