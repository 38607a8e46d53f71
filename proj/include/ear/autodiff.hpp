// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode differentiation over 2-D tensors.
//
// A Var is a handle to a graph node holding a value and, when it requires a
// gradient, a gradient buffer of identical length. Operations executed while a
// Tape is active on the current thread (see TapeScope) append one record per
// produced Var; Tape::backward replays the records in exact reverse order.
// Without an active tape, operations only compute values.
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ear/error.hpp"
#include "ear/tensor.hpp"

namespace ear {

struct Node {
  Tensor value;
  std::vector<double> grad;
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  const Dims& dims() const { return node_->value.dims(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

  /// Gradient as a tensor of the value's dims; zeros when never reached.
  Tensor grad() const {
    if (!has_grad()) return Tensor(node_->value.dims(), 0.0);
    return Tensor(node_->value.dims(), node_->grad);
  }
  void zero_grad() const {
    if (node_) node_->grad.clear();
  }

  /// Leaf mutation, used by optimizers and checkpoint loading only.
  Tensor& mutable_value() const { return node_->value; }
  std::vector<double>& mutable_grad() const { return node_->grad_buffer(); }

  const std::shared_ptr<Node>& node() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

inline Var constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

inline Var parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

class Tape {
 public:
  using Backward = std::function<void(const Node& out)>;

  void push(std::shared_ptr<Node> out, Backward fn) { records_.push_back({std::move(out), std::move(fn)}); }
  std::size_t size() const noexcept { return records_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the recorded adjoints newest-first.
  /// The tape is consumed.
  void backward(const Var& loss) {
    if (!loss || loss.size() != 1) {
      throw ContractError("backward: loss must be a scalar, got " +
                          (loss ? dims_to_string(loss.dims()) : std::string("<null>")));
    }
    if (!loss.requires_grad()) {
      records_.clear();
      return;
    }
    loss.node()->grad_buffer()[0] += 1.0;
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->out->grad.size() == it->out->value.size()) it->fn(*it->out);
    }
    records_.clear();
  }

  void clear() noexcept { records_.clear(); }

 private:
  struct Record {
    std::shared_ptr<Node> out;
    Backward fn;
  };
  std::vector<Record> records_;
};

namespace detail {

inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}

inline bool tracking(std::initializer_list<const Var*> inputs) {
  if (!active_tape()) return false;
  for (const Var* v : inputs) {
    if (v->requires_grad()) return true;
  }
  return false;
}

inline bool tracking(std::span<const Var> inputs) {
  if (!active_tape()) return false;
  for (const Var& v : inputs) {
    if (v.requires_grad()) return true;
  }
  return false;
}

inline Var emit(Tensor value, bool track, Tape::Backward fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (track) {
    n->requires_grad = true;
    active_tape()->push(n, std::move(fn));
  }
  return Var(std::move(n));
}

inline void accumulate(const std::shared_ptr<Node>& n, std::span<const double> g) {
  if (!n->requires_grad) return;
  auto& buf = n->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

inline void require_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError(std::string(op) + ": " + dims_to_string(a.dims()) + " vs " + dims_to_string(b.dims()));
  }
}

inline void require_blocks(const char* op, std::size_t rows, std::size_t seq_len) {
  if (seq_len == 0 || rows % seq_len != 0) {
    throw ShapeError(std::string(op) + ": " + std::to_string(rows) + " rows are not a whole number of length-" +
                     std::to_string(seq_len) + " sequences");
  }
}

/// C = A·B (m×k · k×n), accumulating into c when accumulate is set.
inline void gemm(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a(i, p);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(p, j);
    }
  }
}

/// C += A·Bᵀ (m×k · n×k)
inline void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * b(j, p);
      c(i, j) += s;
    }
  }
}

/// C += Aᵀ·B (k×m · k×n)
inline void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double av = a(p, i);
      if (av == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) c(i, j) += av * b(p, j);
    }
  }
}

inline Tensor grad_tensor(const Node& n) { return Tensor(n.value.dims(), n.grad); }

}  // namespace detail

/// Activates a tape on the current thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : previous_(detail::active_tape()) { detail::active_tape() = &tape; }
  ~TapeScope() { detail::active_tape() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dims disagree for " + dims_to_string(av.dims()) + " and " +
                     dims_to_string(bv.dims()));
  }
  Tensor out = Tensor::matrix(av.rows(), bv.cols());
  detail::gemm(av, bv, out);
  auto an = a.node(), bn = b.node();
  return detail::emit(std::move(out), detail::tracking({&a, &b}), [an, bn](const Node& y) {
    const Tensor dy = detail::grad_tensor(y);
    if (an->requires_grad) {
      Tensor da = Tensor::matrix(an->value.rows(), an->value.cols());
      detail::gemm_nt(dy, bn->value, da);
      detail::accumulate(an, da.values());
    }
    if (bn->requires_grad) {
      Tensor db = Tensor::matrix(bn->value.rows(), bn->value.cols());
      detail::gemm_tn(an->value, dy, db);
      detail::accumulate(bn, db.values());
    }
  });
}

/// a·bᵀ for a (m×k) and b (n×k).
inline Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: feature dims disagree for " + dims_to_string(av.dims()) + " and " +
                     dims_to_string(bv.dims()));
  }
  Tensor out = Tensor::matrix(av.rows(), bv.rows());
  detail::gemm_nt(av, bv, out);
  auto an = a.node(), bn = b.node();
  return detail::emit(std::move(out), detail::tracking({&a, &b}), [an, bn](const Node& y) {
    const Tensor dy = detail::grad_tensor(y);
    if (an->requires_grad) {
      Tensor da = Tensor::matrix(an->value.rows(), an->value.cols());
      detail::gemm(dy, bn->value, da);
      detail::accumulate(an, da.values());
    }
    if (bn->requires_grad) {
      Tensor db = Tensor::matrix(bn->value.rows(), bn->value.cols());
      detail::gemm_tn(dy, an->value, db);
      detail::accumulate(bn, db.values());
    }
  });
}

inline Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out = Tensor::matrix(c, r);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(j, i) = xv(i, j);
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, r, c](const Node& y) {
    std::vector<double> g(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = y.grad[j * r + i];
    detail::accumulate(xn, g);
  });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Var add(const Var& a, const Var& b) {
  detail::require_same("add", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::emit(std::move(out), detail::tracking({&a, &b}), [an, bn](const Node& y) {
    detail::accumulate(an, y.grad);
    detail::accumulate(bn, y.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::require_same("sub", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::emit(std::move(out), detail::tracking({&a, &b}), [an, bn](const Node& y) {
    detail::accumulate(an, y.grad);
    if (bn->requires_grad) {
      std::vector<double> g(y.grad.size());
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = -y.grad[i];
      detail::accumulate(bn, g);
    }
  });
}

/// Hadamard product.
inline Var mul(const Var& a, const Var& b) {
  detail::require_same("mul", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::emit(std::move(out), detail::tracking({&a, &b}), [an, bn](const Node& y) {
    const std::size_t n = y.grad.size();
    if (an->requires_grad) {
      std::vector<double> g(n);
      for (std::size_t i = 0; i < n; ++i) g[i] = y.grad[i] * bn->value[i];
      detail::accumulate(an, g);
    }
    if (bn->requires_grad) {
      std::vector<double> g(n);
      for (std::size_t i = 0; i < n; ++i) g[i] = y.grad[i] * an->value[i];
      detail::accumulate(bn, g);
    }
  });
}

/// Elementwise quotient; the denominator must be nonzero.
inline Var div(const Var& a, const Var& b) {
  detail::require_same("div", a.value(), b.value());
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] /= b.value()[i];
  auto an = a.node(), bn = b.node();
  return detail::emit(std::move(out), detail::tracking({&a, &b}), [an, bn](const Node& y) {
    const std::size_t n = y.grad.size();
    if (an->requires_grad) {
      std::vector<double> g(n);
      for (std::size_t i = 0; i < n; ++i) g[i] = y.grad[i] / bn->value[i];
      detail::accumulate(an, g);
    }
    if (bn->requires_grad) {
      std::vector<double> g(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double d = bn->value[i];
        g[i] = -y.grad[i] * an->value[i] / (d * d);
      }
      detail::accumulate(bn, g);
    }
  });
}

/// x + bias with bias (1×n) broadcast over the rows of x (m×n).
inline Var add_row(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rank() != 2 || bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw ShapeError("add_row: bias " + dims_to_string(bv.dims()) + " does not match " + dims_to_string(xv.dims()));
  }
  Tensor out = xv;
  const std::size_t r = xv.rows(), c = xv.cols();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) += bv[j];
  auto xn = x.node(), bn = bias.node();
  return detail::emit(std::move(out), detail::tracking({&x, &bias}), [xn, bn, r, c](const Node& y) {
    detail::accumulate(xn, y.grad);
    if (bn->requires_grad) {
      std::vector<double> g(c, 0.0);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[j] += y.grad[i * c + j];
      detail::accumulate(bn, g);
    }
  });
}

inline Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.values()) v *= s;
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, s](const Node& y) {
    std::vector<double> g(y.grad);
    for (auto& v : g) v *= s;
    detail::accumulate(xn, g);
  });
}

inline Var add_scalar(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.values()) v += s;
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}),
                      [xn](const Node& y) { detail::accumulate(xn, y.grad); });
}

namespace detail {
inline double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

inline Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = detail::sigmoid_scalar(v);
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn](const Node& y) {
    std::vector<double> g(y.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double s = y.value[i];
      g[i] = y.grad[i] * s * (1.0 - s);
    }
    detail::accumulate(xn, g);
  });
}

inline Var relu(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn](const Node& y) {
    std::vector<double> g(y.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = xn->value[i] > 0.0 ? y.grad[i] : 0.0;
    detail::accumulate(xn, g);
  });
}

inline Var leaky_relu(const Var& x, double slope) {
  Tensor out = x.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : slope * v;
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, slope](const Node& y) {
    std::vector<double> g(y.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = xn->value[i] > 0.0 ? y.grad[i] : slope * y.grad[i];
    detail::accumulate(xn, g);
  });
}

// ---------------------------------------------------------------------------
// Normalizations over an axis

namespace detail {

/// Softmax over columns of each length-seq_len row block, i.e. along the
/// time axis of every stacked sequence independently.
inline Var block_softmax_cols(const Var& x, std::size_t seq_len) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  require_blocks("softmax", r, seq_len);
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t b = 0; b < r; b += seq_len) {
    for (std::size_t j = 0; j < c; ++j) {
      double m = xv(b, j);
      for (std::size_t t = 1; t < seq_len; ++t) m = std::max(m, xv(b + t, j));
      double s = 0.0;
      for (std::size_t t = 0; t < seq_len; ++t) s += (out(b + t, j) = std::exp(xv(b + t, j) - m));
      for (std::size_t t = 0; t < seq_len; ++t) out(b + t, j) /= s;
    }
  }
  auto xn = x.node();
  return emit(std::move(out), tracking({&x}), [xn, seq_len, r, c](const Node& y) {
    std::vector<double> g(r * c);
    for (std::size_t b = 0; b < r; b += seq_len) {
      for (std::size_t j = 0; j < c; ++j) {
        double dot = 0.0;
        for (std::size_t t = 0; t < seq_len; ++t) dot += y.grad[(b + t) * c + j] * y.value[(b + t) * c + j];
        for (std::size_t t = 0; t < seq_len; ++t) {
          const std::size_t k = (b + t) * c + j;
          g[k] = y.value[k] * (y.grad[k] - dot);
        }
      }
    }
    accumulate(xn, g);
  });
}

}  // namespace detail

/// Softmax along axis 1 (each row) or axis 0 (each column), max-shifted.
inline Var softmax(const Var& x, std::size_t axis) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2 || axis > 1) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + dims_to_string(xv.dims()));
  }
  if (axis == 0) return detail::block_softmax_cols(x, xv.rows());
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i) {
    double m = xv(i, 0);
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, xv(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += (out(i, j) = std::exp(xv(i, j) - m));
    for (std::size_t j = 0; j < c; ++j) out(i, j) /= s;
  }
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, r, c](const Node& y) {
    std::vector<double> g(r * c);
    for (std::size_t i = 0; i < r; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += y.grad[i * c + j] * y.value[i * c + j];
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = y.value[i * c + j] * (y.grad[i * c + j] - dot);
    }
    detail::accumulate(xn, g);
  });
}

/// Softmax over time within each stacked sequence of seq_len rows.
inline Var sequence_softmax(const Var& x, std::size_t seq_len) { return detail::block_softmax_cols(x, seq_len); }

/// Row-wise layer normalization with per-column gain and bias (1×n).
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gain.value().dims() != Dims{1, c} || bias.value().dims() != Dims{1, c}) {
    throw ShapeError("layer_norm: affine params must be [1x" + std::to_string(c) + "]");
  }
  Tensor normed = Tensor::matrix(r, c);
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) mean += xv(i, j);
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
    var /= static_cast<double>(c);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) normed(i, j) = (xv(i, j) - mean) * inv_std[i];
  }
  Tensor out = normed;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = normed(i, j) * gain.value()[j] + bias.value()[j];
  auto xn = x.node(), gn = gain.node(), bn = bias.node();
  return detail::emit(std::move(out), detail::tracking({&x, &gain, &bias}),
                      [xn, gn, bn, normed = std::move(normed), inv_std = std::move(inv_std), r, c](const Node& y) {
                        std::vector<double> dg(c, 0.0), db(c, 0.0), dx(r * c);
                        for (std::size_t i = 0; i < r; ++i) {
                          double mean_d = 0.0, mean_dn = 0.0;
                          for (std::size_t j = 0; j < c; ++j) {
                            const double gy = y.grad[i * c + j];
                            dg[j] += gy * normed(i, j);
                            db[j] += gy;
                            const double d = gy * gn->value[j];
                            mean_d += d;
                            mean_dn += d * normed(i, j);
                          }
                          mean_d /= static_cast<double>(c);
                          mean_dn /= static_cast<double>(c);
                          for (std::size_t j = 0; j < c; ++j) {
                            const double d = y.grad[i * c + j] * gn->value[j];
                            dx[i * c + j] = inv_std[i] * (d - mean_d - normed(i, j) * mean_dn);
                          }
                        }
                        detail::accumulate(xn, dx);
                        detail::accumulate(gn, dg);
                        detail::accumulate(bn, db);
                      });
}

struct BatchNormState {
  Tensor running_mean;  // [1×n]
  Tensor running_var;   // [1×n]
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Per-column normalization over all rows. In training mode the batch
/// statistics are used and the running estimates updated (unbiased variance);
/// otherwise the running estimates are applied.
inline Var batch_norm(const Var& x, const Var& gamma, const Var& beta, BatchNormState& state, bool training) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (gamma.value().dims() != Dims{1, c} || beta.value().dims() != Dims{1, c} ||
      state.running_mean.dims() != Dims{1, c} || state.running_var.dims() != Dims{1, c}) {
    throw ShapeError("batch_norm: parameters must be [1x" + std::to_string(c) + "] for input " +
                     dims_to_string(xv.dims()));
  }
  Tensor normed = Tensor::matrix(r, c);
  std::vector<double> inv_std(c);
  for (std::size_t j = 0; j < c; ++j) {
    double mean, var;
    if (training) {
      mean = 0.0;
      for (std::size_t i = 0; i < r; ++i) mean += xv(i, j);
      mean /= static_cast<double>(r);
      var = 0.0;
      for (std::size_t i = 0; i < r; ++i) var += (xv(i, j) - mean) * (xv(i, j) - mean);
      const double unbiased = r > 1 ? var / static_cast<double>(r - 1) : 0.0;
      var /= static_cast<double>(r);
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean;
      state.running_var[j] = (1.0 - state.momentum) * state.running_var[j] + state.momentum * unbiased;
    } else {
      mean = state.running_mean[j];
      var = state.running_var[j];
    }
    inv_std[j] = 1.0 / std::sqrt(var + state.eps);
    for (std::size_t i = 0; i < r; ++i) normed(i, j) = (xv(i, j) - mean) * inv_std[j];
  }
  Tensor out = normed;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i, j) = normed(i, j) * gamma.value()[j] + beta.value()[j];
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::emit(
      std::move(out), detail::tracking({&x, &gamma, &beta}),
      [xn, gn, bn, normed = std::move(normed), inv_std = std::move(inv_std), r, c, training](const Node& y) {
        std::vector<double> dg(c, 0.0), db(c, 0.0), dx(r * c);
        for (std::size_t j = 0; j < c; ++j) {
          double mean_d = 0.0, mean_dn = 0.0;
          for (std::size_t i = 0; i < r; ++i) {
            const double gy = y.grad[i * c + j];
            dg[j] += gy * normed(i, j);
            db[j] += gy;
            const double d = gy * gn->value[j];
            mean_d += d;
            mean_dn += d * normed(i, j);
          }
          mean_d /= static_cast<double>(r);
          mean_dn /= static_cast<double>(r);
          for (std::size_t i = 0; i < r; ++i) {
            const double d = y.grad[i * c + j] * gn->value[j];
            dx[i * c + j] = training ? inv_std[j] * (d - mean_d - normed(i, j) * mean_dn) : inv_std[j] * d;
          }
        }
        detail::accumulate(xn, dx);
        detail::accumulate(gn, dg);
        detail::accumulate(bn, db);
      });
}

/// Inverted dropout; identity when p == 0.
inline Var dropout(const Var& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: probability must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = keep(rng) ? s : 0.0;
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, mask = std::move(mask)](const Node& y) {
    std::vector<double> g(y.grad.size());
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = y.grad[i] * mask[i];
    detail::accumulate(xn, g);
  });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  auto xn = x.node();
  return detail::emit(Tensor::matrix(1, 1, s), detail::tracking({&x}), [xn](const Node& y) {
    std::vector<double> g(xn->value.size(), y.grad[0]);
    detail::accumulate(xn, g);
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

/// Column sums within each length-seq_len row block: (B·T)×n -> B×n.
inline Var sequence_sum(const Var& x, std::size_t seq_len) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  detail::require_blocks("sequence_sum", r, seq_len);
  const std::size_t nb = r / seq_len;
  Tensor out = Tensor::matrix(nb, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out(i / seq_len, j) += xv(i, j);
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, seq_len, r, c](const Node& y) {
    std::vector<double> g(r * c);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) g[i * c + j] = y.grad[(i / seq_len) * c + j];
    detail::accumulate(xn, g);
  });
}

inline constexpr double kBceEps = 1e-7;

/// Mean over elements of −w·[t·log p + (1−t)·log(1−p)] with p clamped to
/// [1e-7, 1−1e-7]. The adjoint is evaluated at the clamped probability so a
/// saturated wrong prediction still receives a gradient.
inline Var bce(const Var& pred, const Tensor& target, const Tensor* weight = nullptr) {
  detail::require_same("bce", pred.value(), target);
  if (weight) detail::require_same("bce weight", pred.value(), *weight);
  const std::size_t n = target.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(pred.value()[i], kBceEps, 1.0 - kBceEps);
    const double t = target[i];
    const double w = weight ? (*weight)[i] : 1.0;
    loss -= w * (t * std::log(p) + (1.0 - t) * std::log(1.0 - p));
  }
  auto pn = pred.node();
  std::vector<double> w_copy = weight ? weight->storage() : std::vector<double>{};
  return detail::emit(Tensor::matrix(1, 1, loss * inv_n), detail::tracking({&pred}),
                      [pn, target, w_copy = std::move(w_copy), inv_n](const Node& y) {
                        std::vector<double> g(target.size());
                        for (std::size_t i = 0; i < g.size(); ++i) {
                          const double p = std::clamp(pn->value[i], kBceEps, 1.0 - kBceEps);
                          const double t = target[i];
                          const double w = w_copy.empty() ? 1.0 : w_copy[i];
                          g[i] = y.grad[0] * inv_n * w * ((1.0 - t) / (1.0 - p) - t / p);
                        }
                        detail::accumulate(pn, g);
                      });
}

// ---------------------------------------------------------------------------
// Structural

inline Var slice_cols(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (count == 0 || begin + count > c) {
    throw ShapeError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) + ") out of " +
                     dims_to_string(xv.dims()));
  }
  Tensor out = Tensor::matrix(r, count);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < count; ++j) out(i, j) = xv(i, begin + j);
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, begin, count, r, c](const Node& y) {
    std::vector<double> g(r * c, 0.0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * c + begin + j] = y.grad[i * count + j];
    detail::accumulate(xn, g);
  });
}

inline Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no parts");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) {
      throw ShapeError("concat_cols: " + dims_to_string(parts.front().dims()) + " vs " + dims_to_string(p.dims()));
    }
    c += p.cols();
  }
  Tensor out = Tensor::matrix(r, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p.value()(i, j);
    off += p.cols();
  }
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::emit(std::move(out), detail::tracking(parts), [nodes, r, c](const Node& y) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t w = n->value.cols();
      if (n->requires_grad) {
        std::vector<double> g(r * w);
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] = y.grad[i * c + off + j];
        detail::accumulate(n, g);
      }
      off += w;
    }
  });
}

inline Var concat_cols(std::initializer_list<Var> parts) {
  std::vector<Var> v(parts);
  return concat_cols(std::span<const Var>(v));
}

inline Var slice_rows(const Var& x, std::size_t begin, std::size_t count) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  Tensor out = xv.row_slice(begin, count);
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, begin, r, c](const Node& y) {
    std::vector<double> g(r * c, 0.0);
    std::copy(y.grad.begin(), y.grad.end(), g.begin() + static_cast<std::ptrdiff_t>(begin * c));
    detail::accumulate(xn, g);
  });
}

inline Var concat_rows(std::span<const Var> parts) {
  std::vector<Tensor> values;
  values.reserve(parts.size());
  for (const auto& p : parts) values.push_back(p.value());
  Tensor out = concat_rows(std::span<const Tensor>(values));
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::emit(std::move(out), detail::tracking(parts), [nodes](const Node& y) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t len = n->value.size();
      detail::accumulate(n, std::span<const double>(y.grad).subspan(off, len));
      off += len;
    }
  });
}

/// Row gather: out[i] = x[index[i]].
inline Var gather_rows(const Var& x, std::span<const std::size_t> index) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  if (index.empty()) throw ShapeError("gather_rows: empty index");
  Tensor out = Tensor::matrix(index.size(), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= r) throw ShapeError("gather_rows: index " + std::to_string(index[i]) + " out of " +
                                        dims_to_string(xv.dims()));
    for (std::size_t j = 0; j < c; ++j) out(i, j) = xv(index[i], j);
  }
  auto xn = x.node();
  std::vector<std::size_t> idx(index.begin(), index.end());
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, idx = std::move(idx), r, c](const Node& y) {
    std::vector<double> g(r * c, 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) g[idx[i] * c + j] += y.grad[i * c + j];
    detail::accumulate(xn, g);
  });
}

/// out[t] = x[t + offset] within each sequence, zero where t + offset falls
/// outside the sequence. The building block of same-padded temporal
/// convolution.
inline Var shift_rows(const Var& x, long offset, std::size_t seq_len) {
  const Tensor& xv = x.value();
  const std::size_t r = xv.rows(), c = xv.cols();
  detail::require_blocks("shift_rows", r, seq_len);
  Tensor out = Tensor::matrix(r, c);
  const long len = static_cast<long>(seq_len);
  for (std::size_t b = 0; b < r; b += seq_len) {
    for (long t = 0; t < len; ++t) {
      const long src = t + offset;
      if (src < 0 || src >= len) continue;
      for (std::size_t j = 0; j < c; ++j) out(b + static_cast<std::size_t>(t), j) = xv(b + static_cast<std::size_t>(src), j);
    }
  }
  auto xn = x.node();
  return detail::emit(std::move(out), detail::tracking({&x}), [xn, offset, seq_len, r, c](const Node& y) {
    std::vector<double> g(r * c, 0.0);
    const long len = static_cast<long>(seq_len);
    for (std::size_t b = 0; b < r; b += seq_len) {
      for (long t = 0; t < len; ++t) {
        const long src = t + offset;
        if (src < 0 || src >= len) continue;
        for (std::size_t j = 0; j < c; ++j)
          g[(b + static_cast<std::size_t>(src)) * c + j] += y.grad[(b + static_cast<std::size_t>(t)) * c + j];
      }
    }
    detail::accumulate(xn, g);
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Per-(sequence, head) attention weight matrices softmax(QKᵀ/√d_h), each
/// seq_len×seq_len, ordered sequence-major then head.
inline std::vector<Tensor> attention_weights(const Tensor& q, const Tensor& k, std::size_t heads,
                                             std::size_t seq_len) {
  const std::size_t r = q.rows(), dim = q.cols();
  const std::size_t dh = dim / heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> out;
  for (std::size_t b = 0; b < r; b += seq_len) {
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor a = Tensor::matrix(seq_len, seq_len);
      for (std::size_t i = 0; i < seq_len; ++i) {
        double m = -INFINITY;
        for (std::size_t j = 0; j < seq_len; ++j) {
          double s = 0.0;
          for (std::size_t d = 0; d < dh; ++d) s += q(b + i, h * dh + d) * k(b + j, h * dh + d);
          a(i, j) = s * inv;
          m = std::max(m, a(i, j));
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq_len; ++j) z += (a(i, j) = std::exp(a(i, j) - m));
        for (std::size_t j = 0; j < seq_len; ++j) a(i, j) /= z;
      }
      out.push_back(std::move(a));
    }
  }
  return out;
}

/// Multi-head scaled dot-product attention over stacked sequences. q, k, v
/// are (B·T)×D projected streams; heads split D into equal column groups and
/// attention never crosses sequence boundaries.
inline Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, std::size_t heads, std::size_t seq_len) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  detail::require_same("attention q/k", qv, kv);
  detail::require_same("attention k/v", kv, vv);
  if (heads == 0 || qv.cols() % heads != 0) {
    throw ConfigError("attention: width " + std::to_string(qv.cols()) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  detail::require_blocks("attention", qv.rows(), seq_len);
  const std::size_t r = qv.rows(), dim = qv.cols(), dh = dim / heads;
  std::vector<Tensor> weights = attention_weights(qv, kv, heads, seq_len);
  Tensor out = Tensor::matrix(r, dim);
  std::size_t idx = 0;
  for (std::size_t b = 0; b < r; b += seq_len) {
    for (std::size_t h = 0; h < heads; ++h, ++idx) {
      const Tensor& a = weights[idx];
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double w = a(i, j);
          for (std::size_t d = 0; d < dh; ++d) out(b + i, h * dh + d) += w * vv(b + j, h * dh + d);
        }
    }
  }
  auto qn = q.node(), kn = k.node(), vn = v.node();
  return detail::emit(
      std::move(out), detail::tracking({&q, &k, &v}),
      [qn, kn, vn, weights = std::move(weights), heads, seq_len, r, dim, dh](const Node& y) {
        const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
        std::vector<double> dq(r * dim, 0.0), dk(r * dim, 0.0), dv(r * dim, 0.0);
        const Tensor& qv = qn->value;
        const Tensor& kv = kn->value;
        const Tensor& vv = vn->value;
        std::vector<double> da(seq_len * seq_len), ds(seq_len * seq_len);
        std::size_t idx = 0;
        for (std::size_t b = 0; b < r; b += seq_len) {
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const Tensor& a = weights[idx];
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < seq_len; ++i) {
              for (std::size_t j = 0; j < seq_len; ++j) {
                double s = 0.0;
                for (std::size_t d = 0; d < dh; ++d) {
                  const double gy = y.grad[(b + i) * dim + c0 + d];
                  s += gy * vv(b + j, c0 + d);
                  dv[(b + j) * dim + c0 + d] += a(i, j) * gy;
                }
                da[i * seq_len + j] = s;
              }
              double dot = 0.0;
              for (std::size_t j = 0; j < seq_len; ++j) dot += da[i * seq_len + j] * a(i, j);
              for (std::size_t j = 0; j < seq_len; ++j) ds[i * seq_len + j] = a(i, j) * (da[i * seq_len + j] - dot) * inv;
            }
            for (std::size_t i = 0; i < seq_len; ++i)
              for (std::size_t j = 0; j < seq_len; ++j) {
                const double g = ds[i * seq_len + j];
                if (g == 0.0) continue;
                for (std::size_t d = 0; d < dh; ++d) {
                  dq[(b + i) * dim + c0 + d] += g * kv(b + j, c0 + d);
                  dk[(b + j) * dim + c0 + d] += g * qv(b + i, c0 + d);
                }
              }
          }
        }
        detail::accumulate(qn, dq);
        detail::accumulate(kn, dk);
        detail::accumulate(vn, dv);
      });
}

}  // namespace ear
