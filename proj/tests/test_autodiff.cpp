#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "b2n3d/nn.hpp"
#include "gradcheck.hpp"

using namespace b2n;
using b2n::testing::check_input;
using b2n::testing::MatD;
using V = ad::Var<double>;
using T = ad::Tape<double>;

namespace {

MatD random_matrix(int r, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  MatD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = d(rng);
  return m;
}

// Weighted sum so every output entry carries a distinct gradient.
V probe(T& t, V y) { return ad::sum_all(ad::mul(y, t.constant(random_matrix(y.rows(), y.cols(), 99)))); }

constexpr double kTol = 1e-6;

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  const MatD x = random_matrix(3, 4, 1);
  const MatD other = random_matrix(3, 4, 2);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::add(a, t.constant(other))); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::sub(t.constant(other), a)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::mul(a, a)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::scale(a, 2.5)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::sigmoid(a)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::relu(a)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::leaky_relu(a, 0.2)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::elu(a)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::transpose(a)); }).rel_error, kTol);
}

TEST(Autodiff, MatrixOps) {
  const MatD x = random_matrix(3, 4, 3);
  const MatD w = random_matrix(4, 5, 4);
  const MatD row = random_matrix(1, 4, 5);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::matmul(a, t.constant(w))); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::matmul_nt(a, a)); }).rel_error, kTol);
  EXPECT_LT(check_input(row, [&](T& t, V r) { return probe(t, ad::add_row(t.constant(x), r)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::mean_rows(a)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T&, V a) { return ad::mean_all(ad::mul(a, a)); }).rel_error, kTol);
  const MatD col = random_matrix(3, 1, 6);
  EXPECT_LT(check_input(col, [&](T& t, V c) { return probe(t, ad::outer_add(c, t.constant(row))); }).rel_error, kTol);
  EXPECT_LT(check_input(row, [&](T& t, V r) { return probe(t, ad::outer_add(t.constant(col), r)); }).rel_error, kTol);
}

TEST(Autodiff, Restructuring) {
  const MatD x = random_matrix(4, 3, 7);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::gather_rows(a, {2, 0, 2, 3})); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::concat_rows<double>({a, ad::scale(a, 3.0)})); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::concat_cols<double>({a, ad::sigmoid(a)})); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::slice_cols(a, 1, 2)); }).rel_error, kTol);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::slice_rows(a, 1, 2)); }).rel_error, kTol);
  const MatD other = random_matrix(4, 3, 8);
  EXPECT_LT(check_input(x, [&](T& t, V a) {
              return probe(t, ad::select_rows({true, false, true, false}, a, t.constant(other)));
            }).rel_error,
            kTol);
}

TEST(Autodiff, SoftmaxAndLayerNorm) {
  const MatD x = random_matrix(3, 5, 9);
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::softmax_rows(a)); }).rel_error, kTol);
  ad::BoolMatrix mask = ad::BoolMatrix::Constant(3, 5, true);
  mask(0, 1) = mask(2, 4) = mask(2, 0) = false;
  EXPECT_LT(check_input(x, [&](T& t, V a) { return probe(t, ad::softmax_rows(a, &mask)); }).rel_error, kTol);
  const MatD gain = random_matrix(1, 5, 10), bias = random_matrix(1, 5, 11);
  EXPECT_LT(check_input(x, [&](T& t, V a) {
              return probe(t, ad::layer_norm(a, t.constant(gain), t.constant(bias)));
            }).rel_error,
            kTol);
  EXPECT_LT(check_input(gain, [&](T& t, V g) {
              return probe(t, ad::layer_norm(t.constant(x), g, t.constant(bias)));
            }).rel_error,
            kTol);
}

TEST(Autodiff, MaskedSoftmaxZeroesHiddenEntries) {
  T t;
  ad::BoolMatrix mask = ad::BoolMatrix::Constant(1, 3, true);
  mask(0, 1) = false;
  const auto p = ad::softmax_rows(t.constant(random_matrix(1, 3, 12)), &mask);
  EXPECT_EQ(p.value()(0, 1), 0.0);
  EXPECT_NEAR(p.value().sum(), 1.0, 1e-15);
}

TEST(Autodiff, MultiHeadAttention) {
  const MatD q = random_matrix(3, 4, 13), kv = random_matrix(5, 4, 14);
  ad::BoolMatrix mask = ad::BoolMatrix::Constant(3, 5, true);
  mask(1, 0) = mask(1, 2) = false;
  EXPECT_LT(check_input(q, [&](T& t, V a) {
              const V k = t.constant(kv);
              return probe(t, ad::multi_head_attention(a, k, k, 2, &mask));
            }).rel_error,
            kTol);
  EXPECT_LT(check_input(kv, [&](T& t, V a) {
              return probe(t, ad::multi_head_attention(t.constant(q), a, a, 2, &mask));
            }).rel_error,
            kTol);
}

TEST(Autodiff, AttentionRejectsIndivisibleHeads) {
  T t;
  const V q = t.constant(random_matrix(2, 5, 15));
  EXPECT_THROW(ad::multi_head_attention(q, q, q, 2), std::invalid_argument);
}

TEST(Autodiff, Losses) {
  const MatD z = random_matrix(3, 3, 16);
  MatD r = MatD::Zero(3, 3);
  r(0, 1) = r(1, 0) = r(2, 2) = 1.0;
  EXPECT_LT(check_input(z, [&](T&, V a) { return ad::bce_with_logits(a, r, 1e-7); }).rel_error, kTol);
  EXPECT_LT(check_input(z, [&](T&, V a) { return ad::cross_entropy(a, {2, 0, 1}); }).rel_error, kTol);
}

TEST(Autodiff, BceMatchesDirectFormula) {
  T t;
  MatD z(1, 2);
  z << 0.3, -1.2;
  MatD r(1, 2);
  r << 1.0, 0.0;
  const double got = ad::bce_with_logits(t.constant(z), r, 1e-7).scalar();
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  const double expected = -(std::log(sig(0.3)) + std::log(1.0 - sig(-1.2))) / 2.0;
  EXPECT_NEAR(got, expected, 1e-14);
}

TEST(Autodiff, BceClampsSaturatedLogits) {
  T t;
  MatD z(1, 1);
  z << -200.0;
  MatD r(1, 1);
  r << 1.0;
  EXPECT_NEAR(ad::bce_with_logits(t.constant(z), r, 1e-7).scalar(), -std::log(1e-7), 1e-12);
}

TEST(Autodiff, CrossEntropyUniform) {
  T t;
  EXPECT_NEAR(ad::cross_entropy(t.constant(MatD::Zero(1, 2)), {0}).scalar(), std::log(2.0), 1e-15);
  EXPECT_THROW(ad::cross_entropy(t.constant(MatD::Zero(1, 2)), {2}), std::invalid_argument);
}

TEST(Autodiff, GradientsAccumulateAcrossUses) {
  T t;
  const V x = t.variable(MatD::Constant(1, 1, 3.0));
  const V y = ad::add(ad::mul(x, x), x);
  t.backward(ad::sum_all(y));
  EXPECT_DOUBLE_EQ(t.grad(x.id)(0, 0), 7.0);
}

TEST(Autodiff, ParameterGradientsAddIntoBuffers) {
  ad::ParameterStore<double> store;
  store.add("w", MatD::Constant(1, 1, 2.0));
  auto grads = store.zero_gradients();
  for (int k = 0; k < 2; ++k) {
    T t(&store);
    t.backward(ad::sum_all(ad::mul(t.param(0), t.param(0))), &grads);
  }
  EXPECT_DOUBLE_EQ(grads[0](0, 0), 8.0);
}

TEST(Autodiff, DuplicateParameterNameRejected) {
  ad::ParameterStore<double> store;
  store.add("w", MatD::Zero(1, 1));
  EXPECT_THROW(store.add("w", MatD::Zero(1, 1)), std::logic_error);
}

TEST(Autodiff, DropoutIsIdentityAtZeroRateAndUnbiased) {
  std::mt19937_64 rng(3);
  T t;
  const MatD ones = MatD::Ones(200, 50);
  const auto same = ad::dropout(t.constant(ones), 0.0, rng);
  EXPECT_EQ(same.value(), ones);
  const auto dropped = ad::dropout(t.constant(ones), 0.1, rng);
  EXPECT_NEAR(dropped.value().mean(), 1.0, 0.02);
}

TEST(NeuralModules, GradientsMatchFiniteDifferences) {
  ad::ParameterStore<double> store;
  nn::Initializer<double> init(store, 5);
  const auto mlp = nn::Mlp::create(init, "mlp", 4, 6, 4);
  const auto mha = nn::MultiHeadAttention::create(init, "mha", 4, 2);
  const auto layer = nn::TransformerLayer::create(init, "enc", 4, 2);
  const MatD x = random_matrix(3, 4, 17);
  auto f = [&](T& t) {
    V h = mlp(t, t.constant(x));
    h = mha(t, h, h);
    h = layer(t, h);
    return probe(t, h);
  };
  for (const auto& c : b2n::testing::check_parameters(store, f)) EXPECT_LT(c.rel_error, 1e-5) << c.name;
}
