#include "aligndet/autograd.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "aligndet/errors.hpp"

namespace aligndet::ad {

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
}

}  // namespace

Var Tape::push(Node n) {
  if (!n.value.allFinite())
    throw NonFiniteActivation("node " + std::to_string(nodes_.size()) + " has NaN/Inf values");
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(const Parameter& p) {
  if (auto it = param_ids_.find(&p); it != param_ids_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = &p;
  Var v = push(std::move(n));
  param_ids_[&p] = v.id();
  return v;
}

Var Tape::record(Matrix value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(fn));
}

Var Tape::record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_)
    for (const Var& v : inputs)
      if (v.requires_grad()) n.requires_grad = true;
  if (n.requires_grad) n.backward = std::move(fn);
  return push(std::move(n));
}

void Tape::backward(const std::vector<std::pair<Var, Matrix>>& seeds) {
  for (const auto& [v, g] : seeds) {
    check_same_shape(v.value(), g, "backward seed");
    accumulate(v.id(), g);
  }
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad) continue;
    if (n.backward) n.backward(*this, n.grad);
  }
}

const Matrix* Tape::grad_of(const Parameter& p) const {
  auto it = param_ids_.find(&p);
  if (it == param_ids_.end()) return nullptr;
  const Node& n = nodes_[static_cast<std::size_t>(it->second)];
  return n.has_grad ? &n.grad : nullptr;
}

// --- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Tape& t = *a.tape();
  const int ia = a.id(), ib = b.id();
  return t.record(a.value() * b.value().transpose(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

Var add(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "add");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

Var sub(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

Var mul(Var a, Var b) {
  check_same_shape(a.value(), b.value(), "mul");
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b},
                          [ia, ib](Tape& t, const Matrix& g) {
                            t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                            t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                          });
}

Var scale(Var a, double s) {
  const int ia = a.id();
  return a.tape()->record(a.value() * s, {a},
                          [ia, s](Tape& t, const Matrix& g) { t.accumulate(ia, g * s); });
}

Var add_row(Var a, Var row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bad row shape");
  const int ia = a.id(), ir = row.id();
  Matrix out = a.value().rowwise() + row.value().row(0);
  return a.tape()->record(std::move(out), {a, row}, [ia, ir](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

Var add_scalar(Var a, Var s) {
  if (s.rows() != 1 || s.cols() != 1) throw ShapeError("add_scalar: expected 1x1");
  const int ia = a.id(), is = s.id();
  Matrix out = a.value().array() + s.value()(0, 0);
  return a.tape()->record(std::move(out), {a, s}, [ia, is](Tape& t, const Matrix& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(is)) t.accumulate(is, Matrix::Constant(1, 1, g.sum()));
  });
}

Var sigmoid(Var a) {
  Matrix out = a.value().unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  Matrix dydx = out.cwiseProduct((1.0 - out.array()).matrix());
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia, dydx = std::move(dydx)](Tape& t, const Matrix& g) {
    t.accumulate(ia, g.cwiseProduct(dydx));
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Matrix out = a.value().unaryExpr([](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  const int ia = a.id();
  return a.tape()->record(std::move(out), {a}, [ia](Tape& t, const Matrix& g) {
    Matrix d = t.value(ia).unaryExpr([](double x) {
      const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.cols();
  if (gamma.cols() != n || beta.cols() != n) throw ShapeError("layer_norm: bad affine shape");
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() +
               beta.value().row(0).array();
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, const Matrix& g) {
        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
        if (!t.requires_grad(ix)) return;
        const Matrix dxhat = g.array().rowwise() * t.value(ig).row(0).array();
        const double n = static_cast<double>(dxhat.cols());
        Matrix dx(dxhat.rows(), dxhat.cols());
        for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
          const double m1 = dxhat.row(r).sum() / n;
          const double m2 = dxhat.row(r).dot(xhat.row(r)) / n;
          dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
        }
        t.accumulate(ix, dx);
      });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    if (p.cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<std::pair<int, Eigen::Index>> ids;
  Eigen::Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    ids.emplace_back(p.id(), p.rows());
    r += p.rows();
  }
  return parts[0].tape()->record(std::move(out), parts, [ids](Tape& t, const Matrix& g) {
    Eigen::Index r = 0;
    for (auto [id, n] : ids) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleRows(r, n));
      r += n;
    }
  });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: range");
  const int ia = a.id();
  const Eigen::Index total = a.rows();
  return a.tape()->record(a.value().middleRows(start, count), {a},
                          [ia, start, count, total](Tape& t, const Matrix& g) {
                            Matrix full = Matrix::Zero(total, g.cols());
                            full.middleRows(start, count) = g;
                            t.accumulate(ia, full);
                          });
}

Var gather_rows(Var a, std::span<const int> rows) {
  Matrix out(static_cast<Eigen::Index>(rows.size()), a.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(rows[i]);
  }
  const int ia = a.id();
  const Eigen::Index total = a.rows();
  return a.tape()->record(std::move(out), {a},
                          [ia, idx = std::vector<int>(rows.begin(), rows.end()), total](
                              Tape& t, const Matrix& g) {
                            Matrix full = Matrix::Zero(total, g.cols());
                            for (std::size_t i = 0; i < idx.size(); ++i)
                              full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                            t.accumulate(ia, full);
                          });
}

Var repeat_row(Var row, Eigen::Index count) {
  if (row.rows() != 1) throw ShapeError("repeat_row: expected a single row");
  const int ir = row.id();
  return row.tape()->record(row.value().replicate(count, 1), {row},
                            [ir](Tape& t, const Matrix& g) { t.accumulate(ir, g.colwise().sum()); });
}

Var linear(Var x, Var w, Var b) { return add_row(matmul(x, w), b); }

Var attention(Var q, Var k, Var v, int num_heads, const BoolMatrix* allowed) {
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Eigen::Index nq = qv.rows(), nk = kv.rows(), d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || vv.rows() != nk || d % num_heads != 0)
    throw ShapeError("attention: incompatible q/k/v shapes");
  if (allowed && (allowed->rows() != nq || allowed->cols() != nk))
    throw ShapeError("attention: mask shape differs from (queries, keys)");
  const Eigen::Index dh = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Matrix> probs(static_cast<std::size_t>(num_heads));
  Matrix out(nq, d);
  for (int h = 0; h < num_heads; ++h) {
    Matrix s = qv.middleCols(h * dh, dh) * kv.middleCols(h * dh, dh).transpose();
    Matrix& p = probs[static_cast<std::size_t>(h)];
    p.resize(nq, nk);
    for (Eigen::Index i = 0; i < nq; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < nk; ++j)
        if (!allowed || (*allowed)(i, j)) mx = std::max(mx, s(i, j) * inv_sqrt);
      double z = 0;
      for (Eigen::Index j = 0; j < nk; ++j) {
        if (allowed && !(*allowed)(i, j)) {
          p(i, j) = 0.0;
          continue;
        }
        p(i, j) = std::exp(s(i, j) * inv_sqrt - mx);
        z += p(i, j);
      }
      if (z > 0) p.row(i) /= z;
    }
    out.middleCols(h * dh, dh) = p * vv.middleCols(h * dh, dh);
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {q, k, v},
      [iq, ik, iv, num_heads, dh, inv_sqrt, probs = std::move(probs)](Tape& t, const Matrix& g) {
        const Matrix& qv = t.value(iq);
        const Matrix& kv = t.value(ik);
        const Matrix& vv = t.value(iv);
        Matrix dq = Matrix::Zero(qv.rows(), qv.cols());
        Matrix dk = Matrix::Zero(kv.rows(), kv.cols());
        Matrix dv = Matrix::Zero(vv.rows(), vv.cols());
        for (int h = 0; h < num_heads; ++h) {
          const Matrix& p = probs[static_cast<std::size_t>(h)];
          const auto gh = g.middleCols(h * dh, dh);
          dv.middleCols(h * dh, dh) = p.transpose() * gh;
          const Matrix dp = gh * vv.middleCols(h * dh, dh).transpose();
          const Eigen::VectorXd rs = dp.cwiseProduct(p).rowwise().sum();
          Matrix ds = p.cwiseProduct((dp.colwise() - rs)) * inv_sqrt;
          dq.middleCols(h * dh, dh) = ds * kv.middleCols(h * dh, dh);
          dk.middleCols(h * dh, dh) = ds.transpose() * qv.middleCols(h * dh, dh);
        }
        t.accumulate(iq, dq);
        t.accumulate(ik, dk);
        t.accumulate(iv, dv);
      });
}

double sine_frequency(int k, int num_freqs) {
  return std::numbers::pi * std::exp2(8.0 * static_cast<double>(k) / static_cast<double>(num_freqs));
}

Var sine_embed(Var boxes, int feats_per_coord) {
  if (feats_per_coord % 2 != 0) throw ShapeError("sine_embed: feature count must be even");
  const Matrix& b = boxes.value();
  const Eigen::Index n = b.rows(), c = b.cols();
  const int nf = feats_per_coord / 2;
  Matrix out(n, c * feats_per_coord);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < c; ++j)
      for (int k = 0; k < nf; ++k) {
        const double a = sine_frequency(k, nf) * b(i, j);
        out(i, j * feats_per_coord + 2 * k) = std::sin(a);
        out(i, j * feats_per_coord + 2 * k + 1) = std::cos(a);
      }
  const int ib = boxes.id();
  return boxes.tape()->record(std::move(out), {boxes},
                              [ib, feats_per_coord, nf](Tape& t, const Matrix& g) {
                                const Matrix& b = t.value(ib);
                                Matrix d = Matrix::Zero(b.rows(), b.cols());
                                for (Eigen::Index i = 0; i < b.rows(); ++i)
                                  for (Eigen::Index j = 0; j < b.cols(); ++j)
                                    for (int k = 0; k < nf; ++k) {
                                      const double f = sine_frequency(k, nf);
                                      const double a = f * b(i, j);
                                      d(i, j) += f * (std::cos(a) * g(i, j * feats_per_coord + 2 * k) -
                                                      std::sin(a) * g(i, j * feats_per_coord + 2 * k + 1));
                                    }
                                t.accumulate(ib, d);
                              });
}

}  // namespace aligndet::ad
