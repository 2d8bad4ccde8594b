#include <gtest/gtest.h>

#include <random>

#include "b2n3d/encoders.hpp"
#include "gradcheck.hpp"

using namespace b2n;
using b2n::testing::check_input;
using b2n::testing::check_parameters;
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

V probe(T& t, V y) { return ad::sum_all(ad::mul(y, t.constant(random_matrix(y.rows(), y.cols(), 42)))); }

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.dim = 8;
  cfg.dim2d = 4;
  cfg.heads = 2;
  cfg.text_layers = 1;
  return cfg;
}

struct Fixture {
  ad::ParameterStore<double> store;
  Encoders enc;
  explicit Fixture(int n_tokens = 12, std::uint64_t seed = 3) {
    nn::Initializer<double> init(store, seed);
    enc = Encoders::create(init, small_config(), 6, n_tokens);
  }
  void zero(const nn::Linear& l) {
    store[l.weight].value.setZero();
    if (l.bias >= 0) store[l.bias].value.setZero();
  }
};

Box3 box(double x, double y, double z, double sx = 1, double sy = 1, double sz = 1) { return Box3{{x, y, z}, {sx, sy, sz}}; }

}  // namespace

TEST(Fusion, ZeroMapsGiveResidualIdentity) {
  Fixture f;
  f.zero(f.enc.phi);
  f.zero(f.enc.fuse_mlp.first);
  f.zero(f.enc.fuse_mlp.second);
  T t(&f.store);
  const MatD f3d = random_matrix(3, 8, 1);
  const V o = fuse_object_features(t, f.enc, t.constant(random_matrix(3, 4, 2)), t.constant(f3d));
  EXPECT_EQ(o.value(), f3d);
}

TEST(Fusion, ZeroTwoDInputReducesToMlpPlusResidual) {
  Fixture f;
  T t(&f.store);
  const MatD f3d = random_matrix(3, 8, 3);
  const V x = t.constant(f3d);
  const V o = fuse_object_features(t, f.enc, t.constant(MatD::Zero(3, 4)), x);
  // phi(0) is its bias, which starts at zero.
  const V expected = ad::add(f.enc.fuse_mlp(t, x), x);
  EXPECT_TRUE(o.value().isApprox(expected.value(), 1e-15));
}

TEST(Fusion, RowMismatchIsAnInputError) {
  Fixture f;
  T t(&f.store);
  EXPECT_THROW(fuse_object_features(t, f.enc, t.constant(MatD::Zero(2, 4)), t.constant(MatD::Zero(3, 8))), InputError);
}

TEST(Fusion, GradientWithRespectToThreeDFeatures) {
  Fixture f;
  const MatD f2d = random_matrix(3, 4, 4);
  const auto check = check_input(
      random_matrix(3, 8, 5), [&](T& t, V x) { return probe(t, fuse_object_features(t, f.enc, t.constant(f2d), x)); },
      &f.store);
  EXPECT_LT(check.rel_error, 1e-4);
}

TEST(Fusion, ParameterGradients) {
  Fixture f;
  const MatD f2d = random_matrix(3, 4, 6), f3d = random_matrix(3, 8, 7);
  auto fn = [&](T& t) { return probe(t, fuse_object_features(t, f.enc, t.constant(f2d), t.constant(f3d))); };
  for (const auto& c : check_parameters(f.store, fn, "enc.phi")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
  for (const auto& c : check_parameters(f.store, fn, "enc.fuse")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
}

TEST(ToyFeatures, NoiselessSameCategorySameBoxGiveIdenticalRows) {
  Fixture f;
  T t(&f.store);
  const MatD boxes = box_parameters({box(1, 2, 0.5), box(1, 2, 0.5), box(1, 2, 0.5)});
  const auto feats = toy_object_features<double>(t, f.enc, {2, 2, 4}, boxes, 0.0, nullptr);
  EXPECT_EQ(feats.f3d.value().row(0), feats.f3d.value().row(1));
  EXPECT_EQ(feats.f2d.value().row(0), feats.f2d.value().row(1));
  EXPECT_NE(feats.f3d.value().row(0), feats.f3d.value().row(2));
  EXPECT_NE(feats.f2d.value().row(0), feats.f2d.value().row(2));
}

TEST(ToyFeatures, FixedSeedReproducible) {
  Fixture a, b;
  const MatD boxes = box_parameters({box(0, 0, 0), box(3, 1, 0)});
  std::mt19937_64 ra(9), rb(9);
  T ta(&a.store), tb(&b.store);
  const auto fa = toy_object_features<double>(ta, a.enc, {0, 1}, boxes, 0.1, &ra);
  const auto fb = toy_object_features<double>(tb, b.enc, {0, 1}, boxes, 0.1, &rb);
  EXPECT_EQ(fa.f3d.value(), fb.f3d.value());
  std::mt19937_64 rc(10);
  T tc(&a.store);
  EXPECT_NE(toy_object_features<double>(tc, a.enc, {0, 1}, boxes, 0.1, &rc).f3d.value(), fa.f3d.value());
}

TEST(BoxEmbedding, ZeroBoxZeroBiasIsZero) {
  Fixture f;
  T t(&f.store);
  EXPECT_TRUE(embed_box(t, f.enc, MatD(MatD::Zero(1, 6))).value().isZero());
}

TEST(BoxEmbedding, Additive) {
  Fixture f;
  f.store[f.enc.box_embed.bias].value = random_matrix(1, 8, 11);
  T t(&f.store);
  const MatD b1 = random_matrix(1, 6, 12), b2 = random_matrix(1, 6, 13);
  const MatD lhs = embed_box(t, f.enc, MatD(b1 + b2)).value();
  const MatD e1 = embed_box(t, f.enc, b1).value();
  const MatD e2 = embed_box(t, f.enc, b2).value();
  const MatD rhs = e1 + e2 - f.store[f.enc.box_embed.bias].value;
  EXPECT_TRUE(lhs.isApprox(rhs, 1e-14));
}

TEST(BoxEmbedding, ParameterGradients) {
  Fixture f;
  const MatD b = random_matrix(3, 6, 14);
  auto fn = [&](T& t) { return probe(t, embed_box(t, f.enc, b)); };
  for (const auto& c : check_parameters(f.store, fn, "enc.box_embed")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
}

TEST(Geometry, SelfPairIsTheBias) {
  Fixture f;
  f.store[f.enc.geo_embed.bias].value = random_matrix(1, 8, 15);
  const std::vector<Box3> boxes{box(0, 0, 0), box(2, 1, 0, 2, 1, 1)};
  const MatD raw = pairwise_geometry_raw(boxes);
  EXPECT_TRUE(raw.row(0).isZero());
  EXPECT_TRUE(raw.row(3).isZero());
  T t(&f.store);
  const V geo = pairwise_geometry(t, f.enc, raw);
  EXPECT_EQ(geo.value().row(0), f.store[f.enc.geo_embed.bias].value.row(0));
}

TEST(Geometry, OffsetAntisymmetryAndDistance) {
  const std::vector<Box3> boxes{box(0, 0, 0), box(3, 4, 0, 2, 2, 2), box(1, -1, 2)};
  const MatD g = pairwise_geometry_raw(boxes);
  const int n = 3;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      for (int k = 0; k < 3; ++k) EXPECT_EQ(g(i * n + j, k), -g(j * n + i, k));
      EXPECT_DOUBLE_EQ(g(i * n + j, 4), -g(j * n + i, 4));
    }
  }
  EXPECT_DOUBLE_EQ(g(0 * n + 1, 3), 5.0);
  EXPECT_DOUBLE_EQ(g(0 * n + 1, 4), std::log(1.0 / 8.0));
}

TEST(Geometry, VerticalGapSign) {
  const Box3 table{{0, 0, 0.4}, {1, 1, 0.8}};
  const Box3 lamp{{0, 0, 1.0}, {0.2, 0.2, 0.4}};
  EXPECT_NEAR(vertical_gap(lamp, table), 0.0, 1e-12);
  const Box3 shelf{{0, 0, 2.0}, {1, 1, 0.2}};
  EXPECT_NEAR(vertical_gap(shelf, table), 1.1, 1e-12);
  EXPECT_NEAR(vertical_gap(table, shelf), -1.1, 1e-12);
}

TEST(Geometry, ParameterGradients) {
  Fixture f;
  const MatD raw = pairwise_geometry_raw({box(0, 0, 0), box(1, 2, 0), box(-1, 0, 1)}) / 5.0;
  auto fn = [&](T& t) { return probe(t, pairwise_geometry(t, f.enc, raw)); };
  for (const auto& c : check_parameters(f.store, fn, "enc.geo_embed")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
}

TEST(TextEncoder, DeterministicAndOrderSensitive) {
  const TokenVocabulary vocab = TokenVocabulary::build({"the lamp closest to the chair"});
  Fixture f(vocab.size());
  const auto ids = vocab.encode("the lamp closest to the chair", 48);
  T t(&f.store);
  const auto a = encode_text(t, f.enc, ids);
  const auto b = encode_text(t, f.enc, ids);
  EXPECT_EQ(a.feature.value(), b.feature.value());
  const auto swapped = encode_text(t, f.enc, vocab.encode("the chair closest to the lamp", 48));
  EXPECT_NE(a.feature.value(), swapped.feature.value());
  EXPECT_EQ(a.logits.cols(), 6);
}

TEST(TextEncoder, EmptyTextIsAnInputError) {
  Fixture f;
  T t(&f.store);
  EXPECT_THROW(encode_text<double>(t, f.enc, {}), InputError);
}

TEST(TextEncoder, UnknownWordsMapToZero) {
  const TokenVocabulary vocab = TokenVocabulary::build({"the lamp"});
  EXPECT_EQ(vocab.tokens()[0], "<unk>");
  const auto ids = vocab.encode("the sofa", 48);
  ASSERT_EQ(ids.size(), 2u);
  EXPECT_GT(ids[0], 0);
  EXPECT_EQ(ids[1], 0);
  EXPECT_EQ(vocab.encode("the lamp the lamp", 3).size(), 3u);
}

TEST(TextEncoder, ParameterGradients) {
  const TokenVocabulary vocab = TokenVocabulary::build({"the lamp left of the desk"});
  Fixture f(vocab.size());
  const auto ids = vocab.encode("the lamp left of the desk", 48);
  auto fn = [&](T& t) {
    const auto e = encode_text(t, f.enc, ids);
    return ad::add(probe(t, e.feature), probe(t, e.logits));
  };
  for (const auto& c : check_parameters(f.store, fn, "enc.text")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
  for (const auto& c : check_parameters(f.store, fn, "enc.token_embed")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
}

TEST(ObjectHead, ZeroWeightsGiveUniformLogits) {
  Fixture f;
  f.zero(f.enc.object_head);
  T t(&f.store);
  const V logits = classify_objects(t, f.enc, t.constant(random_matrix(5, 8, 16)));
  EXPECT_EQ(logits.rows(), 5);
  EXPECT_EQ(logits.cols(), 6);
  EXPECT_TRUE(logits.value().isZero());
}

TEST(ObjectHead, ParameterGradients) {
  Fixture f;
  const MatD o = random_matrix(4, 8, 17);
  auto fn = [&](T& t) { return ad::cross_entropy(classify_objects(t, f.enc, t.constant(o)), {0, 3, 3, 5}); };
  for (const auto& c : check_parameters(f.store, fn, "enc.object_head")) EXPECT_LT(c.rel_error, 1e-4) << c.name;
}

TEST(Encoders, OutputsFiniteOnGeneratedScenes) {
  Fixture f;
  std::mt19937_64 rng(1);
  for (const auto& rec : generate_records(GenConfig{}, 20)) {
    std::vector<int> cats;
    const Vocabulary v = GenConfig{}.vocabulary();
    for (const auto& o : rec.scene.objects) cats.push_back(v.find(o.category));
    std::vector<Box3> boxes;
    for (const auto& o : rec.scene.objects) boxes.push_back(o.box);
    T t(&f.store);
    const auto feats = toy_object_features<double>(t, f.enc, cats, box_parameters(boxes) / 5.0, 0.1, &rng);
    const V o = fuse_object_features(t, f.enc, feats.f2d, feats.f3d);
    EXPECT_TRUE(o.value().allFinite());
    EXPECT_TRUE(pairwise_geometry(t, f.enc, MatD(pairwise_geometry_raw(boxes) / 5.0)).value().allFinite());
  }
}
