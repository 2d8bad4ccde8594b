#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "b2n3d/graph_grounding.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

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
  cfg.heads = 2;
  return cfg;
}

struct GatFixture {
  ad::ParameterStore<double> store;
  GraphAttention gat;
  explicit GatFixture(int dim = 8, int heads = 2) {
    nn::Initializer<double> init(store, 5);
    gat = GraphAttention::create(init, "gat", dim, heads);
  }
  MatD w() const { return store[gat.w.weight].value; }
  MatD a_src() const { return store[gat.a_src].value; }
  MatD a_dst() const { return store[gat.a_dst].value; }
};

std::vector<std::vector<bool>> to_lists(const ad::BoolMatrix& m) {
  std::vector<std::vector<bool>> out(static_cast<std::size_t>(m.rows()));
  for (int i = 0; i < m.rows(); ++i) {
    for (int j = 0; j < m.cols(); ++j) out[i].push_back(m(i, j));
  }
  return out;
}

struct NetFixture {
  ad::ParameterStore<double> store;
  GroundingNetwork net;
  NetFixture() {
    nn::Initializer<double> init(store, 8);
    net = GroundingNetwork::create(init, small_config());
  }
};

}  // namespace

TEST(SceneGraph, FourObjectClique) {
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 3, 5, 7}});
  EXPECT_EQ(g.size(), 4);
  EXPECT_EQ(g.edges.size(), 6u);
}

TEST(SceneGraph, TwoCliquesSharingANode) {
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{1, 2}, {2, 4}});
  EXPECT_EQ(g.nodes, (std::vector<int>{1, 2, 4}));
  EXPECT_EQ(g.edges, (std::set<std::pair<int, int>>{{1, 2}, {2, 4}}));
  EXPECT_TRUE(g.connected(2, 1));
  EXPECT_FALSE(g.connected(1, 4));
  EXPECT_EQ(g.node_index.at(4), 2);
}

TEST(SceneGraph, EdgesMatchBruteForceCliques) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<std::vector<int>> combos;
    std::vector<std::set<int>> sets;
    const int k = 1 + static_cast<int>(rng() % 8);
    for (int c = 0; c < k; ++c) {
      std::set<int> s;
      const int size = 2 + static_cast<int>(rng() % 3);
      while (static_cast<int>(s.size()) < size) s.insert(static_cast<int>(rng() % 10));
      sets.push_back(s);
      combos.emplace_back(s.begin(), s.end());
    }
    const auto g = build_scene_graph(combos);
    EXPECT_EQ(g.edges, b2n::testing::brute_clique_edges(sets));
    for (const auto& [a, b] : g.edges) {
      EXPECT_NE(a, b);
      EXPECT_TRUE(g.contains(a) && g.contains(b));
    }
  }
}

TEST(SceneGraph, CompleteAndPairGraphs) {
  EXPECT_EQ(complete_graph(5).edges.size(), 10u);
  const auto g = pair_graph({{0, 2}, {2, 0}, {3, 1}});
  EXPECT_EQ(g.nodes, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(g.edges.size(), 2u);
}

TEST(GraphAttention, SingleNeighbourCopiesItsFeatures) {
  GatFixture f(4, 1);
  f.store[f.gat.w.weight].value = MatD::Identity(4, 4);
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1}});
  const ad::BoolMatrix adj = adjacency(g, false);
  T t(&f.store);
  MatD h(2, 4);
  h << 0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0;  // positive, where ELU is the identity
  const V out = graph_attention_layer(t, f.gat, t.constant(h), adj);
  EXPECT_TRUE(out.value().row(0).isApprox(h.row(1), 1e-15));
  EXPECT_TRUE(out.value().row(1).isApprox(h.row(0), 1e-15));
}

TEST(GraphAttention, CoefficientsSumToOnePerHead) {
  GatFixture f;
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1, 2}, {2, 3}});
  const ad::BoolMatrix adj = adjacency(g, true);
  T t(&f.store);
  std::vector<MatD> alphas;
  graph_attention_layer(t, f.gat, t.constant(random_matrix(4, 8, 1)), adj, &alphas);
  ASSERT_EQ(alphas.size(), 2u);
  for (const auto& a : alphas) {
    for (int i = 0; i < 4; ++i) {
      EXPECT_NEAR(a.row(i).sum(), 1.0, 1e-14);
      for (int j = 0; j < 4; ++j) {
        if (!adj(i, j)) {
          EXPECT_EQ(a(i, j), 0.0);
        }
      }
    }
  }
}

TEST(GraphAttention, PathGraphMatchesDenseOracle) {
  GatFixture f;
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1}, {1, 2}});
  for (bool self_loop : {false, true}) {
    const ad::BoolMatrix adj = adjacency(g, self_loop);
    const MatD h = random_matrix(3, 8, 2);
    T t(&f.store);
    const MatD got = graph_attention_layer(t, f.gat, t.constant(h), adj).value();
    const Eigen::MatrixXd want = b2n::testing::dense_gat(h, f.w(), f.a_src(), f.a_dst(), to_lists(adj), 2);
    EXPECT_TRUE(got.isApprox(MatD(want), 1e-13)) << self_loop;
  }
}

TEST(GraphAttention, NonNeighboursDoNotInfluence) {
  GatFixture f;
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1}, {2, 3}});
  const ad::BoolMatrix adj = adjacency(g, true);
  MatD h = random_matrix(4, 8, 3);
  T t(&f.store);
  const MatD before = graph_attention_layer(t, f.gat, t.constant(h), adj).value();
  h.row(3).setZero();
  const MatD after = graph_attention_layer(t, f.gat, t.constant(h), adj).value();
  EXPECT_EQ(before.row(0), after.row(0));
  EXPECT_EQ(before.row(1), after.row(1));
  EXPECT_NE(before.row(2), after.row(2));
}

TEST(GraphAttention, IsolatedNodePassesThrough) {
  GatFixture f;
  ad::BoolMatrix adj = ad::BoolMatrix::Constant(3, 3, false);
  adj(0, 1) = adj(1, 0) = true;
  const MatD h = random_matrix(3, 8, 4);
  T t(&f.store);
  const MatD out = graph_attention_layer(t, f.gat, t.constant(h), adj).value();
  EXPECT_EQ(out.row(2), h.row(2));
  EXPECT_TRUE(out.allFinite());
}

TEST(GraphAttention, Gradients) {
  GatFixture f;
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1, 2}, {2, 3}});
  const ad::BoolMatrix adj = adjacency(g, true);
  const MatD h = random_matrix(4, 8, 5);
  auto fn = [&](T& t) { return probe(t, graph_attention_layer(t, f.gat, t.constant(h), adj)); };
  for (const auto& c : check_parameters(f.store, fn)) EXPECT_LT(c.rel_error, 1e-4) << c.name;
  EXPECT_LT(check_input(h, [&](T& t, V x) { return probe(t, graph_attention_layer(t, f.gat, x, adj)); }, &f.store)
                .rel_error,
            1e-4);
}

TEST(Ground, SingleNodeIsAlwaysPredicted) {
  NetFixture f;
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{3}});
  T t(&f.store);
  const auto out = ground(t, f.net, g, t.constant(random_matrix(5, 8, 6)), RelationTokens<double>{},
                          t.constant(random_matrix(1, 8, 7)), true);
  EXPECT_EQ(out.predicted, 3);
  EXPECT_EQ(out.confidences.size(), 1u);
}

TEST(Ground, RunsGraphAttentionTwice) {
  NetFixture f;
  T t(&f.store);
  const auto out = ground(t, f.net, complete_graph(4), t.constant(random_matrix(4, 8, 8)), RelationTokens<double>{},
                          t.constant(random_matrix(1, 8, 9)), true);
  EXPECT_EQ(out.gat_calls, 2);
  for (double c : out.confidences) EXPECT_TRUE(std::isfinite(c));
}

TEST(Ground, PermutationEquivariant) {
  NetFixture f;
  const int n = 6;
  const MatD o = random_matrix(n, 8, 10), text = random_matrix(1, 8, 11), tok = random_matrix(3, 8, 12);
  const std::vector<std::vector<int>> combos{{0, 2, 5}, {1, 2}, {4, 5}};
  const std::vector<int> owners_obj{0, 2, 5};  // object owning each relation token
  std::mt19937_64 rng(13);
  std::vector<int> perm(n);  // new id of object k
  std::iota(perm.begin(), perm.end(), 0);
  auto run = [&](const std::vector<int>& pm) {
    MatD op(n, 8);
    for (int k = 0; k < n; ++k) op.row(pm[k]) = o.row(k);
    std::vector<std::vector<int>> pc;
    for (const auto& c : combos) {
      std::vector<int> m;
      for (int x : c) m.push_back(pm[x]);
      pc.push_back(m);
    }
    const auto g = build_scene_graph(pc);
    T t(&f.store);
    RelationTokens<double> rt;
    rt.features = t.constant(tok);
    for (int x : owners_obj) rt.owner.push_back(g.node_index.at(pm[x]));
    const auto out = ground(t, f.net, g, t.constant(op), rt, t.constant(text), true);
    std::map<int, double> by_object;  // original object id -> confidence
    for (int k = 0; k < g.size(); ++k) {
      const int new_id = g.nodes[k];
      const int orig = static_cast<int>(std::find(pm.begin(), pm.end(), new_id) - pm.begin());
      by_object[orig] = out.confidences[k];
    }
    const int orig_pred = static_cast<int>(std::find(pm.begin(), pm.end(), out.predicted) - pm.begin());
    return std::make_pair(by_object, orig_pred);
  };
  const auto base = run(perm);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    const auto other = run(perm);
    EXPECT_EQ(other.second, base.second);
    for (const auto& [obj, conf] : base.first) EXPECT_NEAR(other.first.at(obj), conf, 1e-12);
  }
}

TEST(Ground, EmptyGraphIsAContractViolation) {
  NetFixture f;
  T t(&f.store);
  EXPECT_THROW(ground(t, f.net, SceneGraph{}, t.constant(random_matrix(2, 8, 14)), RelationTokens<double>{},
                      t.constant(random_matrix(1, 8, 15)), true),
               ContractError);
}

TEST(Ground, ParameterGradients) {
  NetFixture f;
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1, 3}, {1, 2}});
  const MatD o = random_matrix(4, 8, 16), text = random_matrix(1, 8, 17), tok = random_matrix(2, 8, 18);
  auto fn = [&](T& t) {
    RelationTokens<double> rt;
    rt.features = t.constant(tok);
    rt.owner = {0, 2};
    const auto out = ground(t, f.net, g, t.constant(o), rt, t.constant(text), true);
    return grounding_loss(out.logits, g, 1);
  };
  for (const auto& c : check_parameters(f.store, fn)) EXPECT_LT(c.rel_error, 1e-4) << c.name;
}

TEST(GroundingLoss, UniformTwoNodesGiveLn2) {
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{2, 5}});
  T t;
  EXPECT_NEAR(grounding_loss(t.constant(MatD(MatD::Zero(1, 2))), g, 5).scalar(), std::log(2.0), 1e-15);
  MatD sharp(1, 2);
  sharp << -30.0, 30.0;
  EXPECT_LT(grounding_loss(t.constant(sharp), g, 5).scalar(), 1e-20);
}

TEST(GroundingLoss, MissingTargetIsAContractViolation) {
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{2, 5}});
  T t;
  EXPECT_THROW(grounding_loss(t.constant(MatD(MatD::Zero(1, 2))), g, 0), ContractError);
}

TEST(GroundingLoss, Gradient) {
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{0, 1, 2}});
  EXPECT_LT(check_input(random_matrix(1, 3, 19), [&](T&, V z) { return grounding_loss(z, g, 2); }).rel_error, 1e-6);
}

TEST(GroundingLoss, ScatterToAllObjects) {
  const auto g = build_scene_graph(std::vector<std::vector<int>>{{1, 3}});
  T t;
  MatD z(1, 2);
  z << 0.5, -0.25;
  const MatD all = scatter_to_objects(t, t.constant(z), g, 4).value();
  MatD want(1, 4);
  want << kAbsentLogit, 0.5, kAbsentLogit, -0.25;
  EXPECT_EQ(all, want);
}
