#pragma once

#include <cmath>
#include <random>
#include <string>

#include "b2n3d/autodiff.hpp"

// Parameterised layers. Each layer stores indices into a ParameterStore and builds its
// forward pass on a Tape; the layer objects themselves hold no numeric state.
namespace b2n::nn {

using ad::Matrix;
using ad::ParameterStore;
using ad::Tape;
using ad::Var;

/// Deterministic initialiser shared by all layers of one model.
template <typename S>
class Initializer {
 public:
  Initializer(ParameterStore<S>& store, std::uint64_t seed) : store_(store), rng_(seed) {}

  ParameterStore<S>& store() { return store_; }

  int uniform(const std::string& name, int rows, int cols, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng_));
    return store_.add(name, std::move(m));
  }
  int xavier(const std::string& name, int rows, int cols) {
    return uniform(name, rows, cols, std::sqrt(6.0 / static_cast<double>(rows + cols)));
  }
  int normal(const std::string& name, int rows, int cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<S> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng_));
    return store_.add(name, std::move(m));
  }
  int constant(const std::string& name, int rows, int cols, S value) {
    return store_.add(name, Matrix<S>::Constant(rows, cols, value));
  }

 private:
  ParameterStore<S>& store_;
  std::mt19937_64 rng_;
};

/// y = x W + b
struct Linear {
  int weight = -1;
  int bias = -1;  // -1: no bias
  int in = 0;
  int out = 0;

  template <typename S>
  static Linear create(Initializer<S>& init, const std::string& name, int in, int out, bool with_bias = true) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = init.xavier(name + ".weight", in, out);
    if (with_bias) l.bias = init.constant(name + ".bias", 1, out, S(0));
    return l;
  }

  template <typename S>
  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    Var<S> y = ad::matmul(x, t.param(weight));
    if (bias >= 0) y = ad::add_row(y, t.param(bias));
    return y;
  }
};

/// Two linear layers with a ReLU in between.
struct Mlp {
  Linear first;
  Linear second;

  template <typename S>
  static Mlp create(Initializer<S>& init, const std::string& name, int in, int hidden, int out) {
    return {Linear::create(init, name + ".0", in, hidden), Linear::create(init, name + ".1", hidden, out)};
  }

  template <typename S>
  Var<S> operator()(Tape<S>& t, Var<S> x, S dropout = S(0), std::mt19937_64* rng = nullptr) const {
    Var<S> h = ad::relu(first(t, x));
    if (rng && dropout > S(0)) h = ad::dropout(h, dropout, *rng);
    return second(t, h);
  }
};

struct LayerNorm {
  int gain = -1;
  int bias = -1;

  template <typename S>
  static LayerNorm create(Initializer<S>& init, const std::string& name, int dim) {
    return {init.constant(name + ".gain", 1, dim, S(1)), init.constant(name + ".bias", 1, dim, S(0))};
  }

  template <typename S>
  Var<S> operator()(Tape<S>& t, Var<S> x) const {
    return ad::layer_norm(x, t.param(gain), t.param(bias));
  }
};

/// Projected multi-head attention: Wo · Attention(Wq q, Wk kv, Wv kv).
struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;

  template <typename S>
  static MultiHeadAttention create(Initializer<S>& init, const std::string& name, int dim, int heads) {
    if (heads <= 0 || dim % heads != 0) throw std::invalid_argument(name + ": dim must be divisible by heads");
    return {Linear::create(init, name + ".q", dim, dim), Linear::create(init, name + ".k", dim, dim),
            Linear::create(init, name + ".v", dim, dim), Linear::create(init, name + ".o", dim, dim), heads};
  }

  template <typename S>
  Var<S> operator()(Tape<S>& t, Var<S> queries, Var<S> keys_values, const ad::BoolMatrix* mask = nullptr,
                    std::vector<Matrix<S>>* weights = nullptr) const {
    if (queries.cols() != keys_values.cols()) throw std::invalid_argument("attention: query/key dim mismatch");
    Var<S> a = ad::multi_head_attention(q(t, queries), k(t, keys_values), v(t, keys_values), heads, mask, weights);
    return o(t, a);
  }
};

/// Post-norm transformer encoder layer used by the text encoder.
struct TransformerLayer {
  MultiHeadAttention attention;
  LayerNorm norm1;
  Mlp ffn;
  LayerNorm norm2;

  template <typename S>
  static TransformerLayer create(Initializer<S>& init, const std::string& name, int dim, int heads) {
    return {MultiHeadAttention::create(init, name + ".attn", dim, heads), LayerNorm::create(init, name + ".norm1", dim),
            Mlp::create(init, name + ".ffn", dim, 2 * dim, dim), LayerNorm::create(init, name + ".norm2", dim)};
  }

  template <typename S>
  Var<S> operator()(Tape<S>& t, Var<S> x, S dropout = S(0), std::mt19937_64* rng = nullptr) const {
    Var<S> a = attention(t, x, x);
    if (rng && dropout > S(0)) a = ad::dropout(a, dropout, *rng);
    x = norm1(t, ad::add(x, a));
    Var<S> f = ffn(t, x, dropout, rng);
    return norm2(t, ad::add(x, f));
  }
};

}  // namespace b2n::nn
