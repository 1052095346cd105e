#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

namespace aligndet::ad {

using Matrix = Eigen::MatrixXd;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// A trainable tensor: value plus accumulated gradient of the same shape.
struct Parameter {
  Matrix value;
  Matrix grad;

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Tape;

/// Handle to a node recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool requires_grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records a forward computation and replays it backwards.
///
/// Every node value is checked for NaN/Inf as it is recorded. A tape built
/// with grad disabled records values only.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Matrix& grad_out)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value);
  /// Leaf bound to `p`; repeated binds of the same parameter share one node.
  /// After `backward()`, the gradient is available through `grad_of(p)`.
  Var param(const Parameter& p);
  /// Gradient reaching parameter `p`, or nullptr when it was unused.
  const Matrix* grad_of(const Parameter& p) const;

  /// Records an op output. `inputs` decide whether the node needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn);

  const Matrix& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Adds `g` into the gradient of node `id` (no-op for constants).
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    auto& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad) return;
    if (!n.has_grad) {
      n.grad = g;
      n.has_grad = true;
    } else {
      n.grad += g;
    }
  }

  /// Seeds d(objective)/d(var) for each pair and back-propagates.
  void backward(const std::vector<std::pair<Var, Matrix>>& seeds);

  std::size_t size() const { return nodes_.size(); }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    const Parameter* param = nullptr;
    BackwardFn backward;
  };

  Var push(Node n);

  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_ids_;
  bool grad_enabled_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }
inline bool Var::requires_grad() const { return tape_->requires_grad(id_); }

// --- ops -------------------------------------------------------------------

Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// Adds a 1 x n row to every row of a.
Var add_row(Var a, Var row);
/// Adds a 1 x 1 scalar to every entry.
Var add_scalar(Var a, Var s);
Var sigmoid(Var a);
/// tanh-approximated GELU
Var gelu(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var gather_rows(Var a, std::span<const int> rows);
/// Repeats a 1 x n row `count` times.
Var repeat_row(Var row, Eigen::Index count);
/// Linear layer: x * w + b.
Var linear(Var x, Var w, Var b);

/// Multi-head scaled dot-product attention over pre-projected q (Nq x d),
/// k and v (Nk x d). `allowed`, when given, is Nq x Nk; false entries are
/// excluded before the softmax. Softmax and its normalizer are accumulated in
/// ascending key order.
Var attention(Var q, Var k, Var v, int num_heads, const BoolMatrix* allowed = nullptr);

/// Sinusoidal embedding of an N x 4 box tensor (values in [0,1]); each
/// coordinate maps to `feats_per_coord` sin/cos features.
Var sine_embed(Var boxes, int feats_per_coord);

/// Multi-frequency sin/cos features of a scalar in [0,1]; shared by the box
/// embedding and the image positional encoding.
double sine_frequency(int k, int num_freqs);

}  // namespace aligndet::ad
