#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Tape records one forward pass. Every operation pushes a node holding its value and a
// closure that scatters the node's gradient into its inputs. Parameters enter as leaves
// that reference the ParameterStore without copying; Tape::backward adds their gradients
// into a caller-owned buffer so several tapes can run against one store.
namespace b2n::ad {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

template <typename S>
struct Parameter {
  std::string name;
  Matrix<S> value;
};

/// Ordered, name-addressable parameter collection. Indices are stable.
template <typename S>
class ParameterStore {
 public:
  int add(std::string name, Matrix<S> init) {
    for (const auto& p : params_) {
      if (p.name == name) throw std::logic_error("duplicate parameter name: " + name);
    }
    params_.push_back({std::move(name), std::move(init)});
    return static_cast<int>(params_.size()) - 1;
  }

  int size() const { return static_cast<int>(params_.size()); }
  Parameter<S>& operator[](int i) { return params_[static_cast<std::size_t>(i)]; }
  const Parameter<S>& operator[](int i) const { return params_[static_cast<std::size_t>(i)]; }
  std::vector<Parameter<S>>& all() { return params_; }
  const std::vector<Parameter<S>>& all() const { return params_; }

  long long scalar_count() const {
    long long n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  std::vector<Matrix<S>> zero_gradients() const {
    std::vector<Matrix<S>> g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.push_back(Matrix<S>::Zero(p.value.rows(), p.value.cols()));
    return g;
  }

  template <typename T>
  ParameterStore<T> cast() const {
    ParameterStore<T> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<T>());
    return out;
  }

 private:
  std::vector<Parameter<S>> params_;
};

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Matrix<S>& value() const { return tape->value(id); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  bool valid() const { return tape != nullptr && id >= 0; }
  S scalar() const { return value()(0, 0); }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  explicit Tape(const ParameterStore<S>* store = nullptr) : store_(store) {
    if (store_) param_nodes_.assign(static_cast<std::size_t>(store_->size()), -1);
  }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Matrix<S> v) { return push(std::move(v), false, nullptr); }

  /// Leaf for parameter `index`; repeated calls return the same node.
  Var<S> param(int index) {
    if (!store_) throw std::logic_error("tape has no parameter store");
    int& slot = param_nodes_.at(static_cast<std::size_t>(index));
    if (slot >= 0) return {this, slot};
    Node n;
    n.external = &(*store_)[index].value;
    n.requires_grad = true;
    n.param_index = index;
    nodes_.push_back(std::move(n));
    slot = static_cast<int>(nodes_.size()) - 1;
    return {this, slot};
  }

  /// Differentiable leaf that is not a stored parameter (used by gradient checks on inputs).
  Var<S> variable(Matrix<S> v) { return push(std::move(v), true, nullptr); }

  Var<S> push(Matrix<S> v, bool requires_grad, Backward back) {
    Node n;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(back);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
  }

  const Matrix<S>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.external ? *n.external : n.value;
  }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

  /// Gradient accumulator of node `id`, zero-initialised on first access.
  Matrix<S>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      const auto& v = value(id);
      n.grad = Matrix<S>::Zero(v.rows(), v.cols());
    }
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() != 0; }

  /// Seeds d(root)/d(root) = 1 (root must be 1x1) and propagates. Parameter gradients are
  /// added to `param_grads` when given.
  void backward(Var<S> root, std::vector<Matrix<S>>* param_grads = nullptr) {
    if (value(root.id).size() != 1) throw std::logic_error("backward root must be a scalar");
    grad(root.id).setOnes();
    for (int id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, id);
    }
    if (param_grads) {
      for (const Node& n : nodes_) {
        if (n.param_index >= 0 && n.grad.size() != 0) (*param_grads)[static_cast<std::size_t>(n.param_index)] += n.grad;
      }
    }
  }

  int node_count() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    Matrix<S> value;
    const Matrix<S>* external = nullptr;
    Matrix<S> grad;
    bool requires_grad = false;
    int param_index = -1;
    Backward backward;
  };

  const ParameterStore<S>* store_ = nullptr;
  std::vector<int> param_nodes_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {
template <typename S>
void check_same_shape(const Matrix<S>& a, const Matrix<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                                std::to_string(b.cols()));
  }
}
}  // namespace detail

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
  Matrix<S> out = a.value() * b.value();
  const bool req = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), req, [a, b](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad(a.id).noalias() += g * tp.value(b.id).transpose();
    if (tp.requires_grad(b.id)) tp.grad(b.id).noalias() += tp.value(a.id).transpose() * g;
  });
}

/// a * b^T
template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: inner dimension mismatch");
  Matrix<S> out = a.value() * b.value().transpose();
  const bool req = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), req, [a, b](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad(a.id).noalias() += g * tp.value(b.id);
    if (tp.requires_grad(b.id)) tp.grad(b.id).noalias() += g.transpose() * tp.value(a.id);
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(a.value(), b.value(), "add");
  Matrix<S> out = a.value() + b.value();
  const bool req = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), req, [a, b](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad(a.id) += g;
    if (tp.requires_grad(b.id)) tp.grad(b.id) += g;
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(a.value(), b.value(), "sub");
  Matrix<S> out = a.value() - b.value();
  const bool req = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), req, [a, b](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad(a.id) += g;
    if (tp.requires_grad(b.id)) tp.grad(b.id) -= g;
  });
}

/// Adds a 1xC row to every row of a.
template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  Tape<S>& t = *a.tape;
  if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: expected 1xC row");
  Matrix<S> out = a.value().rowwise() + row.value().row(0);
  const bool req = t.requires_grad(a.id) || t.requires_grad(row.id);
  return t.push(std::move(out), req, [a, row](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad(a.id) += g;
    if (tp.requires_grad(row.id)) tp.grad(row.id) += g.colwise().sum();
  });
}

/// Elementwise (Hadamard) product.
template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(a.value(), b.value(), "mul");
  Matrix<S> out = a.value().cwiseProduct(b.value());
  const bool req = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), req, [a, b](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(a.id)) tp.grad(a.id) += g.cwiseProduct(tp.value(b.id));
    if (tp.requires_grad(b.id)) tp.grad(b.id) += g.cwiseProduct(tp.value(a.id));
  });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = a.value() * s;
  return t.push(std::move(out), t.requires_grad(a.id), [a, s](Tape<S>& tp, int self) {
    tp.grad(a.id) += tp.grad(self) * s;
  });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }

template <typename S>
Var<S> transpose(Var<S> a) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = a.value().transpose();
  return t.push(std::move(out), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    tp.grad(a.id) += tp.grad(self).transpose();
  });
}

template <typename S>
Var<S> relu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = a.value().cwiseMax(S(0));
  return t.push(std::move(out), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    tp.grad(a.id) += (tp.value(a.id).array() > S(0)).select(tp.grad(self).array(), S(0)).matrix();
  });
}

template <typename S>
Var<S> leaky_relu(Var<S> a, S slope) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = (a.value().array() > S(0)).select(a.value().array(), a.value().array() * slope).matrix();
  return t.push(std::move(out), t.requires_grad(a.id), [a, slope](Tape<S>& tp, int self) {
    const auto& x = tp.value(a.id);
    tp.grad(a.id) += (x.array() > S(0)).select(tp.grad(self).array(), tp.grad(self).array() * slope).matrix();
  });
}

template <typename S>
Var<S> elu(Var<S> a) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = (a.value().array() > S(0)).select(a.value().array(), a.value().array().exp() - S(1)).matrix();
  return t.push(std::move(out), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    const auto& x = tp.value(a.id);
    const auto& y = tp.value(self);
    tp.grad(a.id) += (x.array() > S(0)).select(tp.grad(self).array(), tp.grad(self).array() * (y.array() + S(1))).matrix();
  });
}

template <typename S>
Var<S> sigmoid(Var<S> a) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  return t.push(std::move(out), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    const auto& y = tp.value(self);
    tp.grad(a.id) += (tp.grad(self).array() * y.array() * (S(1) - y.array())).matrix();
  });
}

/// Row softmax; entries with mask(r, c) == false get probability 0. A row with nothing
/// visible becomes all zeros.
template <typename S>
Var<S> softmax_rows(Var<S> a, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>* mask = nullptr) {
  Tape<S>& t = *a.tape;
  const Matrix<S>& x = a.value();
  Matrix<S> p(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    S mx = -std::numeric_limits<S>::infinity();
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      if (!mask || (*mask)(r, c)) mx = std::max(mx, x(r, c));
    }
    S z = 0;
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const S e = (!mask || (*mask)(r, c)) ? std::exp(x(r, c) - mx) : S(0);
      p(r, c) = e;
      z += e;
    }
    if (z > S(0)) p.row(r) /= z;
  }
  return t.push(std::move(p), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    const Matrix<S>& y = tp.value(self);
    Matrix<S> gy = g.cwiseProduct(y);
    Eigen::Matrix<S, Eigen::Dynamic, 1> dot = gy.rowwise().sum();
    tp.grad(a.id) += gy - (y.array().colwise() * dot.array()).matrix();
  });
}

/// Row-wise layer normalisation with 1xC gain and bias.
template <typename S>
Var<S> layer_norm(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-5)) {
  Tape<S>& t = *a.tape;
  const Matrix<S>& x = a.value();
  const Eigen::Index n = x.rows(), c = x.cols();
  Matrix<S> xhat(n, c);
  Eigen::Matrix<S, Eigen::Dynamic, 1> inv_std(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std(r);
  }
  Matrix<S> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  const bool req = t.requires_grad(a.id) || t.requires_grad(gain.id) || t.requires_grad(bias.id);
  return t.push(std::move(out), req, [a, gain, bias, xhat, inv_std](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(gain.id)) tp.grad(gain.id) += g.cwiseProduct(xhat).colwise().sum();
    if (tp.requires_grad(bias.id)) tp.grad(bias.id) += g.colwise().sum();
    if (tp.requires_grad(a.id)) {
      Matrix<S> dxhat = (g.array().rowwise() * tp.value(gain.id).row(0).array()).matrix();
      Matrix<S>& ga = tp.grad(a.id);
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        const S m1 = dxhat.row(r).mean();
        const S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
        ga.row(r).array() += inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
      }
    }
  });
}

template <typename S>
Var<S> gather_rows(Var<S> a, std::vector<int> idx) {
  Tape<S>& t = *a.tape;
  const Matrix<S>& x = a.value();
  Matrix<S> out(static_cast<Eigen::Index>(idx.size()), x.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = x.row(idx[r]);
  return t.push(std::move(out), t.requires_grad(a.id), [a, idx = std::move(idx)](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    Matrix<S>& ga = tp.grad(a.id);
    for (std::size_t r = 0; r < idx.size(); ++r) ga.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.at(0).tape;
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool req = false;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    rows += p.rows();
    req = req || t.requires_grad(p.id);
  }
  Matrix<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return t.push(std::move(out), req, [parts](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    Eigen::Index at2 = 0;
    for (const auto& p : parts) {
      const Eigen::Index n = tp.value(p.id).rows();
      if (tp.requires_grad(p.id)) tp.grad(p.id) += g.middleRows(at2, n);
      at2 += n;
    }
  });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  Tape<S>& t = *parts.at(0).tape;
  Eigen::Index cols = 0;
  const Eigen::Index rows = parts[0].rows();
  bool req = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
    req = req || t.requires_grad(p.id);
  }
  Matrix<S> out(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return t.push(std::move(out), req, [parts](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    Eigen::Index at2 = 0;
    for (const auto& p : parts) {
      const Eigen::Index n = tp.value(p.id).cols();
      if (tp.requires_grad(p.id)) tp.grad(p.id) += g.middleCols(at2, n);
      at2 += n;
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, Eigen::Index start, Eigen::Index count) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = a.value().middleCols(start, count);
  return t.push(std::move(out), t.requires_grad(a.id), [a, start, count](Tape<S>& tp, int self) {
    tp.grad(a.id).middleCols(start, count) += tp.grad(self);
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, Eigen::Index start, Eigen::Index count) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = a.value().middleRows(start, count);
  return t.push(std::move(out), t.requires_grad(a.id), [a, start, count](Tape<S>& tp, int self) {
    tp.grad(a.id).middleRows(start, count) += tp.grad(self);
  });
}

/// Rows of `a` where keep[r], rows of `b` elsewhere.
template <typename S>
Var<S> select_rows(const std::vector<bool>& keep, Var<S> a, Var<S> b) {
  Tape<S>& t = *a.tape;
  detail::check_same_shape(a.value(), b.value(), "select_rows");
  Matrix<S> out = b.value();
  for (std::size_t r = 0; r < keep.size(); ++r) {
    if (keep[r]) out.row(static_cast<Eigen::Index>(r)) = a.value().row(static_cast<Eigen::Index>(r));
  }
  const bool req = t.requires_grad(a.id) || t.requires_grad(b.id);
  return t.push(std::move(out), req, [keep, a, b](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    for (std::size_t r = 0; r < keep.size(); ++r) {
      const auto ri = static_cast<Eigen::Index>(r);
      const int target = keep[r] ? a.id : b.id;
      if (tp.requires_grad(target)) tp.grad(target).row(ri) += g.row(ri);
    }
  });
}

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>& t = *a.tape;
  Matrix<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    tp.grad(a.id).array() += tp.grad(self)(0, 0);
  });
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  const auto n = static_cast<S>(a.value().size());
  return scale(sum_all(a), S(1) / n);
}

/// 1xC mean over rows.
template <typename S>
Var<S> mean_rows(Var<S> a) {
  Tape<S>& t = *a.tape;
  Matrix<S> out = a.value().colwise().mean();
  return t.push(std::move(out), t.requires_grad(a.id), [a](Tape<S>& tp, int self) {
    const auto n = static_cast<S>(tp.value(a.id).rows());
    tp.grad(a.id).rowwise() += tp.grad(self).row(0) / n;
  });
}

/// out(i, j) = col(i) + row(j) for a Vx1 column and a 1xW row.
template <typename S>
Var<S> outer_add(Var<S> col, Var<S> row) {
  Tape<S>& t = *col.tape;
  if (col.cols() != 1 || row.rows() != 1) throw std::invalid_argument("outer_add: expected column and row");
  Matrix<S> out = col.value().replicate(1, row.cols());
  out.rowwise() += row.value().row(0);
  const bool req = t.requires_grad(col.id) || t.requires_grad(row.id);
  return t.push(std::move(out), req, [col, row](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    if (tp.requires_grad(col.id)) tp.grad(col.id) += g.rowwise().sum();
    if (tp.requires_grad(row.id)) tp.grad(row.id) += g.colwise().sum();
  });
}

template <typename S>
Var<S> dropout(Var<S> a, S rate, std::mt19937_64& rng) {
  if (rate <= S(0)) return a;
  Tape<S>& t = *a.tape;
  std::bernoulli_distribution keep(1.0 - static_cast<double>(rate));
  Matrix<S> mask(a.rows(), a.cols());
  const S s = S(1) / (S(1) - rate);
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : S(0);
  Matrix<S> out = a.value().cwiseProduct(mask);
  return t.push(std::move(out), t.requires_grad(a.id), [a, mask](Tape<S>& tp, int self) {
    tp.grad(a.id) += tp.grad(self).cwiseProduct(mask);
  });
}

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Scaled dot-product attention over `heads` column blocks of already-projected queries
/// (RxC), keys (LxC) and values (LxC). mask(r, l) == false hides key l from query r.
/// `weights`, when given, receives the per-head attention matrices.
template <typename S>
Var<S> multi_head_attention(Var<S> q, Var<S> k, Var<S> v, int heads, const BoolMatrix* mask = nullptr,
                            std::vector<Matrix<S>>* weights = nullptr) {
  Tape<S>& t = *q.tape;
  const Eigen::Index c = q.cols();
  if (heads <= 0 || c % heads != 0) throw std::invalid_argument("attention: dim not divisible by heads");
  if (k.cols() != c || v.cols() != c || k.rows() != v.rows()) throw std::invalid_argument("attention: shape mismatch");
  const Eigen::Index d = c / heads;
  const S scl = S(1) / std::sqrt(static_cast<S>(d));
  const Eigen::Index r = q.rows(), l = k.rows();
  std::vector<Matrix<S>> probs(static_cast<std::size_t>(heads));
  Matrix<S> out(r, c);
  for (int h = 0; h < heads; ++h) {
    Matrix<S> s = (q.value().middleCols(h * d, d) * k.value().middleCols(h * d, d).transpose()) * scl;
    Matrix<S>& p = probs[static_cast<std::size_t>(h)];
    p.resize(r, l);
    for (Eigen::Index i = 0; i < r; ++i) {
      S mx = -std::numeric_limits<S>::infinity();
      for (Eigen::Index j = 0; j < l; ++j) {
        if (!mask || (*mask)(i, j)) mx = std::max(mx, s(i, j));
      }
      S z = 0;
      for (Eigen::Index j = 0; j < l; ++j) {
        const S e = (!mask || (*mask)(i, j)) ? std::exp(s(i, j) - mx) : S(0);
        p(i, j) = e;
        z += e;
      }
      if (z > S(0)) p.row(i) /= z;
    }
    out.middleCols(h * d, d).noalias() = p * v.value().middleCols(h * d, d);
  }
  if (weights) *weights = probs;
  const bool req = t.requires_grad(q.id) || t.requires_grad(k.id) || t.requires_grad(v.id);
  return t.push(std::move(out), req, [q, k, v, heads, d, scl, probs = std::move(probs)](Tape<S>& tp, int self) {
    const Matrix<S>& g = tp.grad(self);
    const bool rq = tp.requires_grad(q.id), rk = tp.requires_grad(k.id), rv = tp.requires_grad(v.id);
    for (int h = 0; h < heads; ++h) {
      const Matrix<S>& p = probs[static_cast<std::size_t>(h)];
      const auto gh = g.middleCols(h * d, d);
      if (rv) tp.grad(v.id).middleCols(h * d, d).noalias() += p.transpose() * gh;
      if (!rq && !rk) continue;
      Matrix<S> dp = gh * tp.value(v.id).middleCols(h * d, d).transpose();
      Matrix<S> gp = dp.cwiseProduct(p);
      Eigen::Matrix<S, Eigen::Dynamic, 1> dot = gp.rowwise().sum();
      Matrix<S> ds = (gp - (p.array().colwise() * dot.array()).matrix()) * scl;
      if (rq) tp.grad(q.id).middleCols(h * d, d).noalias() += ds * tp.value(k.id).middleCols(h * d, d);
      if (rk) tp.grad(k.id).middleCols(h * d, d).noalias() += ds.transpose() * tp.value(q.id).middleCols(h * d, d);
    }
  });
}

// ---------------------------------------------------------------------------
// Losses

/// log(max(sigmoid(z), eps)) and log(max(1 - sigmoid(z), eps)) evaluated stably.
template <typename S>
inline void clamped_log_sigmoids(S z, S eps, S& log_p, S& log_q, bool& p_clamped, bool& q_clamped) {
  const S sp_neg = z > S(0) ? std::log1p(std::exp(-z)) : -z + std::log1p(std::exp(z));  // softplus(-z)
  const S sp_pos = sp_neg + z;                                                         // softplus(z)
  const S log_eps = std::log(eps);
  log_p = -sp_neg;
  log_q = -sp_pos;
  p_clamped = log_p < log_eps;
  q_clamped = log_q < log_eps;
  if (p_clamped) log_p = log_eps;
  if (q_clamped) log_q = log_eps;
}

/// Mean binary cross-entropy of sigmoid(logits) against targets, logs clamped at eps.
template <typename S>
Var<S> bce_with_logits(Var<S> logits, Matrix<S> targets, S eps) {
  Tape<S>& t = *logits.tape;
  detail::check_same_shape(logits.value(), targets, "bce_with_logits");
  const Matrix<S>& z = logits.value();
  const auto n = static_cast<S>(z.size());
  Matrix<S> dz(z.rows(), z.cols());
  S total = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    S lp, lq;
    bool cp, cq;
    clamped_log_sigmoids(z.data()[i], eps, lp, lq, cp, cq);
    const S r = targets.data()[i];
    total -= r * lp + (S(1) - r) * lq;
    const S p = S(1) / (S(1) + std::exp(-z.data()[i]));
    dz.data()[i] = (-(cp ? S(0) : r * (S(1) - p)) + (cq ? S(0) : (S(1) - r) * p)) / n;
  }
  Matrix<S> out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), t.requires_grad(logits.id), [logits, dz](Tape<S>& tp, int self) {
    tp.grad(logits.id) += dz * tp.grad(self)(0, 0);
  });
}

/// Mean softmax cross-entropy over rows of `logits` against class indices.
template <typename S>
Var<S> cross_entropy(Var<S> logits, const std::vector<int>& targets) {
  Tape<S>& t = *logits.tape;
  const Matrix<S>& z = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != z.rows()) throw std::invalid_argument("cross_entropy: target count");
  Matrix<S> dz(z.rows(), z.cols());
  S total = 0;
  const auto n = static_cast<S>(z.rows());
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const S mx = z.row(r).maxCoeff();
    const auto e = (z.row(r).array() - mx).exp();
    const S lse = mx + std::log(e.sum());
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= z.cols()) throw std::invalid_argument("cross_entropy: target out of range");
    total += lse - z(r, y);
    dz.row(r) = (e / e.sum()).matrix();
    dz(r, y) -= S(1);
  }
  dz /= n;
  Matrix<S> out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), t.requires_grad(logits.id), [logits, dz](Tape<S>& tp, int self) {
    tp.grad(logits.id) += dz * tp.grad(self)(0, 0);
  });
}

}  // namespace b2n::ad
