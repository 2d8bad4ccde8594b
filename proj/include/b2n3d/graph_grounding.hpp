#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <utility>
#include <vector>

#include "b2n3d/b2n_prl.hpp"
#include "b2n3d/config.hpp"
#include "b2n3d/nn.hpp"

namespace b2n {

/// Nodes are object ids in ascending order; edges are undirected (a < b).
struct SceneGraph {
  std::vector<int> nodes;
  std::set<std::pair<int, int>> edges;
  std::map<int, int> node_index;

  int size() const { return static_cast<int>(nodes.size()); }
  bool contains(int object) const { return node_index.count(object) != 0; }
  bool connected(int a, int b) const { return edges.count({std::min(a, b), std::max(a, b)}) != 0; }
};

namespace detail {
inline void index_nodes(SceneGraph& g) {
  g.node_index.clear();
  for (int k = 0; k < g.size(); ++k) g.node_index[g.nodes[static_cast<std::size_t>(k)]] = k;
}
}  // namespace detail

/// Union of cliques over the given object sets.
inline SceneGraph build_scene_graph(const std::vector<std::vector<int>>& combos) {
  SceneGraph g;
  std::set<int> nodes;
  for (const auto& c : combos) {
    for (std::size_t a = 0; a < c.size(); ++a) {
      nodes.insert(c[a]);
      for (std::size_t b = a + 1; b < c.size(); ++b) {
        if (c[a] != c[b]) g.edges.insert({std::min(c[a], c[b]), std::max(c[a], c[b])});
      }
    }
  }
  g.nodes.assign(nodes.begin(), nodes.end());
  detail::index_nodes(g);
  return g;
}

inline SceneGraph build_scene_graph(const std::vector<Combo>& combos, const std::vector<int>& selected) {
  std::vector<std::vector<int>> sets;
  sets.reserve(selected.size());
  for (int c : selected) sets.push_back(combos[static_cast<std::size_t>(c)].objects);
  return build_scene_graph(sets);
}

inline SceneGraph pair_graph(const std::vector<IndexPair>& pairs) {
  std::vector<std::vector<int>> sets;
  for (const auto& p : pairs) sets.push_back({p.i, p.j});
  return build_scene_graph(sets);
}

inline SceneGraph complete_graph(int n) {
  std::vector<int> all(static_cast<std::size_t>(n));
  std::iota(all.begin(), all.end(), 0);
  return build_scene_graph(std::vector<std::vector<int>>{all});
}

/// Neighbour mask over node positions; the diagonal is set when `self_loop`.
inline ad::BoolMatrix adjacency(const SceneGraph& g, bool self_loop) {
  ad::BoolMatrix m = ad::BoolMatrix::Constant(g.size(), g.size(), false);
  for (const auto& [a, b] : g.edges) {
    const int u = g.node_index.at(a), v = g.node_index.at(b);
    m(u, v) = m(v, u) = true;
  }
  if (self_loop) {
    for (int k = 0; k < g.size(); ++k) m(k, k) = true;
  }
  return m;
}

/// Multi-head additive graph attention. Head k scores e_ij = LeakyReLU(a_src . W_k h_i +
/// a_dst . W_k h_j), normalises over the neighbour set and applies ELU before the heads
/// are concatenated.
struct GraphAttention {
  nn::Linear w;    // C -> C, no bias
  int a_src = -1;  // heads x d
  int a_dst = -1;  // heads x d
  int heads = 1;

  template <typename S>
  static GraphAttention create(nn::Initializer<S>& init, const std::string& name, int dim, int heads) {
    if (heads <= 0 || dim % heads != 0) throw ConfigError(name + ": dim must be divisible by heads");
    const int d = dim / heads;
    GraphAttention g;
    g.w = nn::Linear::create(init, name + ".w", dim, dim, false);
    g.a_src = init.xavier(name + ".a_src", heads, d);
    g.a_dst = init.xavier(name + ".a_dst", heads, d);
    g.heads = heads;
    return g;
  }
};

inline constexpr double kGatSlope = 0.2;

/// One graph-attention aggregation. Rows with an empty neighbour set pass through.
/// `alphas`, when given, receives the per-head coefficient matrices.
template <typename S>
Var<S> graph_attention_layer(Tape<S>& t, const GraphAttention& layer, Var<S> h, const ad::BoolMatrix& mask,
                             std::vector<Matrix<S>>* alphas = nullptr) {
  const auto v = h.rows();
  if (mask.rows() != v || mask.cols() != v) throw InputError("graph_attention_layer: mask must be VxV");
  const Eigen::Index c = h.cols();
  if (c % layer.heads != 0) throw ConfigError("graph_attention_layer: dim must be divisible by heads");
  const Eigen::Index d = c / layer.heads;
  Var<S> wh = layer.w(t, h);
  Var<S> a_src = t.param(layer.a_src);
  Var<S> a_dst = t.param(layer.a_dst);
  std::vector<Var<S>> outs;
  if (alphas) alphas->clear();
  for (int k = 0; k < layer.heads; ++k) {
    Var<S> whk = ad::slice_cols(wh, k * d, d);
    Var<S> src = ad::matmul(whk, ad::transpose(ad::slice_rows(a_src, k, 1)));  // V x 1
    Var<S> dst = ad::matmul(ad::slice_rows(a_dst, k, 1), ad::transpose(whk));  // 1 x V
    Var<S> e = ad::leaky_relu(ad::outer_add(src, dst), static_cast<S>(kGatSlope));
    Var<S> alpha = ad::softmax_rows(e, &mask);
    if (alphas) alphas->push_back(alpha.value());
    outs.push_back(ad::elu(ad::matmul(alpha, whk)));
  }
  Var<S> out = outs.size() == 1 ? outs[0] : ad::concat_cols(outs);
  std::vector<bool> isolated(static_cast<std::size_t>(v));
  bool any = false;
  for (Eigen::Index r = 0; r < v; ++r) {
    isolated[static_cast<std::size_t>(r)] = !mask.row(r).any();
    any = any || isolated[static_cast<std::size_t>(r)];
  }
  return any ? ad::select_rows(isolated, h, out) : out;
}

struct GroundingBlock {
  nn::MultiHeadAttention self_attention;
  nn::LayerNorm self_norm;
  CrossAttention cross;
  GraphAttention gat;
  nn::LayerNorm gat_norm;
};

struct GroundingNetwork {
  std::vector<GroundingBlock> blocks;
  nn::Mlp head;  // C -> C -> 1

  static constexpr int kBlocks = 2;

  template <typename S>
  static GroundingNetwork create(nn::Initializer<S>& init, const ModelConfig& cfg) {
    GroundingNetwork g;
    for (int b = 0; b < kBlocks; ++b) {
      const std::string p = "ground." + std::to_string(b);
      g.blocks.push_back({nn::MultiHeadAttention::create(init, p + ".self", cfg.dim, cfg.heads),
                          nn::LayerNorm::create(init, p + ".self_norm", cfg.dim),
                          CrossAttention::create(init, p + ".cross", cfg.dim, cfg.heads),
                          GraphAttention::create(init, p + ".gat", cfg.dim, cfg.heads),
                          nn::LayerNorm::create(init, p + ".gat_norm", cfg.dim)});
    }
    g.head = nn::Mlp::create(init, "ground.head", cfg.dim, cfg.hidden(), 1);
    return g;
  }
};

/// Relation features fused into the nodes by self-attention. `owner[k]` is the node
/// position allowed to see token k, or -1 when every node sees it.
template <typename S>
struct RelationTokens {
  Var<S> features;
  std::vector<int> owner;
  bool empty() const { return owner.empty(); }
};

/// Tokens for the selected pairs in both orientations, each owned by its first object.
/// Pairs whose first object is not a node are dropped. Without masking the selected
/// pairs are used as given and all nodes see all of them.
template <typename S>
RelationTokens<S> relation_tokens(const BinaryRelationState<S>& st, const std::vector<IndexPair>& pairs,
                                  const SceneGraph& g, bool masked) {
  RelationTokens<S> out;
  std::vector<IndexPair> rows;
  if (masked) {
    std::set<IndexPair> seen;
    for (const auto& p : pairs) {
      for (IndexPair q : {p, IndexPair{p.j, p.i}}) {
        if (g.contains(q.i) && seen.insert(q).second) rows.push_back(q);
      }
    }
    for (const auto& q : rows) out.owner.push_back(g.node_index.at(q.i));
  } else {
    rows = pairs;
    out.owner.assign(rows.size(), -1);
  }
  if (!rows.empty()) out.features = selected_relations(st, rows);
  return out;
}

template <typename S>
struct GroundingOutput {
  Var<S> logits;  // 1 x V over graph nodes
  std::vector<S> confidences;
  int predicted = -1;  // object id
  int gat_calls = 0;
};

/// Self-attention over nodes and relation tokens, cross-attention with T, then graph
/// attention; two rounds, then a confidence per node. The argmax favours the lowest id.
template <typename S>
GroundingOutput<S> ground(Tape<S>& t, const GroundingNetwork& net, const SceneGraph& graph, Var<S> o_prime,
                          const RelationTokens<S>& tokens, Var<S> text, bool self_loop, S dropout = S(0),
                          std::mt19937_64* rng = nullptr) {
  if (graph.size() == 0) throw ContractError("ground: empty graph");
  const int v = graph.size();
  Var<S> h = ad::gather_rows(o_prime, graph.nodes);
  const ad::BoolMatrix adj = adjacency(graph, self_loop);
  const int n_tok = static_cast<int>(tokens.owner.size());
  ad::BoolMatrix self_mask = ad::BoolMatrix::Constant(v, v + n_tok, true);
  for (int k = 0; k < n_tok; ++k) {
    const int owner = tokens.owner[static_cast<std::size_t>(k)];
    if (owner < 0) continue;
    for (int u = 0; u < v; ++u) self_mask(u, v + k) = (u == owner);
  }
  GroundingOutput<S> out;
  for (const auto& block : net.blocks) {
    Var<S> kv = n_tok > 0 ? ad::concat_rows(std::vector<Var<S>>{h, tokens.features}) : h;
    Var<S> a = block.self_attention(t, h, kv, n_tok > 0 ? &self_mask : nullptr);
    if (rng && dropout > S(0)) a = ad::dropout(a, dropout, *rng);
    h = block.self_norm(t, ad::add(h, a));
    h = block.cross(t, h, text);
    Var<S> g = graph_attention_layer(t, block.gat, h, adj);
    ++out.gat_calls;
    h = block.gat_norm(t, ad::add(h, g));
  }
  out.logits = ad::transpose(net.head(t, h));
  const auto& z = out.logits.value();
  int best = 0;
  for (int k = 0; k < v; ++k) {
    out.confidences.push_back(z(0, k));
    if (z(0, k) > z(0, best)) best = k;
  }
  out.predicted = graph.nodes[static_cast<std::size_t>(best)];
  return out;
}

/// Cross-entropy of the node softmax against the target's node position.
template <typename S>
Var<S> grounding_loss(Var<S> logits, const SceneGraph& graph, int target_id) {
  auto it = graph.node_index.find(target_id);
  if (it == graph.node_index.end()) {
    throw ContractError("grounding_loss: target " + std::to_string(target_id) + " is not a graph node");
  }
  return ad::cross_entropy(logits, std::vector<int>{it->second});
}

inline constexpr double kAbsentLogit = -10.0;

/// 1 x N logits over all objects; objects outside the graph get a constant low logit.
template <typename S>
Var<S> scatter_to_objects(Tape<S>& t, Var<S> node_logits, const SceneGraph& graph, int n_objects) {
  std::vector<int> idx(static_cast<std::size_t>(n_objects), 0);
  std::vector<bool> present(static_cast<std::size_t>(n_objects), false);
  for (int k = 0; k < graph.size(); ++k) {
    idx[static_cast<std::size_t>(graph.nodes[static_cast<std::size_t>(k)])] = k;
    present[static_cast<std::size_t>(graph.nodes[static_cast<std::size_t>(k)])] = true;
  }
  Var<S> spread = ad::transpose(ad::gather_rows(ad::transpose(node_logits), idx));
  Var<S> absent = t.constant(Matrix<S>::Constant(1, n_objects, static_cast<S>(kAbsentLogit)));
  // select_rows works on rows, so route through the N x 1 layout
  return ad::transpose(ad::select_rows(present, ad::transpose(spread), ad::transpose(absent)));
}

}  // namespace b2n
