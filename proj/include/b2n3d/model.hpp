#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "b2n3d/b2n_prl.hpp"
#include "b2n3d/config.hpp"
#include "b2n3d/encoders.hpp"
#include "b2n3d/graph_grounding.hpp"
#include "b2n3d/relation_extraction.hpp"
#include "b2n3d/rng.hpp"
#include "b2n3d/synthetic.hpp"

namespace b2n {

/// Layer layout of the whole network. Numeric values live in a ParameterStore so the
/// same layout serves float training and double gradient checks.
struct Architecture {
  Encoders encoders;
  B2nPrl prl;
  GroundingNetwork grounding;
  nn::Mlp direct_head;  // scores O' without a graph

  template <typename S>
  static Architecture create(nn::Initializer<S>& init, const ModelConfig& cfg, int n_categories, int n_tokens) {
    Architecture a;
    a.encoders = Encoders::create(init, cfg, n_categories, n_tokens);
    a.prl = B2nPrl::create(init, cfg);
    a.grounding = GroundingNetwork::create(init, cfg);
    a.direct_head = nn::Mlp::create(init, "direct.head", cfg.dim, cfg.hidden(), 1);
    return a;
  }
};

/// Everything the forward pass needs from one record, precomputed once.
struct PreparedRecord {
  int n = 0;
  std::vector<int> categories;  // vocabulary indices
  Matrix<double> box_params;    // N x 6, scaled
  Matrix<double> geometry;      // N*N x 6, scaled
  std::vector<int> tokens;
  int target = 0;
  int target_category = 0;
  BinaryLabels labels;
  int rn = 0;
  int distractors = 0;
};

inline PreparedRecord prepare_record(const Record& rec, const Vocabulary& vocab, const TokenVocabulary& tokens,
                                     const ModelConfig& cfg) {
  const Scene& scene = rec.scene;
  PreparedRecord p;
  p.n = scene.size();
  if (p.n < 2) throw InputError("scene needs at least 2 objects");
  for (const auto& o : scene.objects) {
    const int idx = vocab.find(o.category);
    if (idx < 0) throw InputError("category '" + o.category + "' not in vocabulary");
    p.categories.push_back(idx);
  }
  const auto boxes = detail::boxes_of(scene);
  const double inv = 1.0 / cfg.geometry_scale;
  p.box_params = box_parameters(boxes) * inv;
  p.geometry = pairwise_geometry_raw(boxes);
  p.geometry.col(0) *= inv;
  p.geometry.col(1) *= inv;
  p.geometry.col(2) *= inv;
  p.geometry.col(3) *= inv;
  p.geometry.col(5) *= inv;
  p.tokens = tokens.encode(rec.utterance.text, cfg.max_tokens);
  if (p.tokens.empty()) throw InputError("empty utterance text");
  p.target = scene.target_id;
  p.target_category = vocab.find(rec.utterance.target_category);
  if (p.target_category < 0) {
    throw InputError("target category '" + rec.utterance.target_category + "' not in vocabulary");
  }
  p.labels = pairs_to_binary_labels(rec.utterance.label.pairs, scene);
  p.rn = rec.utterance.rn;
  p.distractors = scene.distractor_count();
  return p;
}

struct LossComponents {
  double ref = 0.0;
  double text = 0.0;
  double object = 0.0;
  double binary = 0.0;
  double nary = 0.0;
};

/// l_ref + lambda1 l_t + lambda2 l_v + lambda3 (l_br + l_nr)
inline double total_loss(double l_ref, double l_t, double l_v, double l_br, double l_nr, const TrainConfig& cfg) {
  return l_ref + cfg.lambda1 * l_t + cfg.lambda2 * l_v + cfg.lambda3 * (l_br + l_nr);
}

struct ForwardOptions {
  bool training = false;
  bool with_loss = true;
  std::uint64_t noise_seed = 0;
  std::mt19937_64* dropout_rng = nullptr;
};

template <typename S>
struct ForwardResult {
  Var<S> loss;  // valid when with_loss
  LossComponents parts;
  int predicted = -1;
  bool target_in_graph = false;
  int graph_nodes = 0;
  int gat_calls = 0;
  bool forced = false;
};

template <typename S>
ForwardResult<S> forward(Tape<S>& t, const Architecture& arch, const ModelConfig& mcfg, const TrainConfig& tcfg,
                         const PreparedRecord& rec, const ForwardOptions& opts) {
  const Encoders& enc = arch.encoders;
  const S drop = opts.training ? static_cast<S>(mcfg.dropout) : S(0);
  std::mt19937_64* drng = opts.training ? opts.dropout_rng : nullptr;
  std::mt19937_64 noise_rng(opts.noise_seed);

  const Matrix<S> box_params = rec.box_params.template cast<S>();
  ToyFeatures<S> feats = toy_object_features(t, enc, rec.categories, box_params, static_cast<S>(mcfg.noise_sigma), &noise_rng);
  Var<S> objects = fuse_object_features(t, enc, feats.f2d, feats.f3d);
  TextEncoding<S> text = encode_text(t, enc, rec.tokens, drop, drng);
  Var<S> f_box = embed_box(t, enc, box_params);

  ForwardResult<S> res;
  const Ablation ab = tcfg.ablation;
  const bool force = opts.training && mcfg.teacher_forcing;
  const int force_target = force ? rec.target : -1;

  Var<S> l_br, l_nr, l_ref;
  if (ab == Ablation::kFullyConnected || ab == Ablation::kNoGraph) {
    Var<S> o_prime = arch.prl.binary_cross(t, ad::add(objects, f_box), text.feature);
    if (ab == Ablation::kNoGraph) {
      Var<S> logits = ad::transpose(arch.direct_head(t, o_prime, drop, drng));
      const auto& z = logits.value();
      int best = 0;
      for (int k = 1; k < rec.n; ++k) {
        if (z(0, k) > z(0, best)) best = k;
      }
      res.predicted = best;
      res.target_in_graph = true;
      res.graph_nodes = rec.n;
      if (opts.with_loss) l_ref = ad::cross_entropy(logits, std::vector<int>{rec.target});
    } else {
      const SceneGraph graph = complete_graph(rec.n);
      GroundingOutput<S> g = ground(t, arch.grounding, graph, o_prime, RelationTokens<S>{}, text.feature,
                                    mcfg.gat_self_loop, drop, drng);
      res.predicted = g.predicted;
      res.target_in_graph = true;
      res.graph_nodes = graph.size();
      res.gat_calls = g.gat_calls;
      if (opts.with_loss) l_ref = grounding_loss(g.logits, graph, rec.target);
    }
  } else {
    mcfg.validate_for_scene(rec.n);
    Var<S> f_geo = pairwise_geometry(t, enc, Matrix<S>(rec.geometry.template cast<S>()));
    BinaryRelationState<S> binary =
        binary_relations(t, arch.prl, objects, f_box, f_geo, text.feature, mcfg.k1, force_target);
    res.forced = binary.forced;
    if (opts.with_loss) l_br = binary_loss(binary.logits, rec.labels, mcfg.mask_lbr_diagonal);
    SceneGraph graph;
    if (ab == Ablation::kFull) {
      NaryRelationState<S> nary = nary_relations(t, arch.prl, binary, text.feature, mcfg.k2, force_target);
      res.forced = res.forced || nary.forced;
      graph = build_scene_graph(nary.combos, nary.topk2);
      if (opts.with_loss) {
        const ComboGroups groups = group_combos(nary.combos, rec.target);
        if (!groups.pos.empty()) l_nr = nary_loss(nary.logits, groups.pos, groups.neg);
      }
    } else {
      graph = pair_graph(binary.topk1);
    }
    const RelationTokens<S> tokens = relation_tokens(binary, binary.topk1, graph, mcfg.relation_token_mask);
    GroundingOutput<S> g =
        ground(t, arch.grounding, graph, binary.o_prime, tokens, text.feature, mcfg.gat_self_loop, drop, drng);
    res.predicted = g.predicted;
    res.target_in_graph = graph.contains(rec.target);
    res.graph_nodes = graph.size();
    res.gat_calls = g.gat_calls;
    if (opts.with_loss) {
      if (mcfg.lref_over_all_objects) {
        l_ref = ad::cross_entropy(scatter_to_objects(t, g.logits, graph, rec.n), std::vector<int>{rec.target});
      } else if (res.target_in_graph) {
        l_ref = grounding_loss(g.logits, graph, rec.target);
      } else if (opts.training) {
        throw ContractError("target missing from the scene graph during training");
      }
    }
  }

  if (!opts.with_loss) return res;
  Var<S> l_t = ad::cross_entropy(text.logits, std::vector<int>{rec.target_category});
  Var<S> l_v = ad::cross_entropy(classify_objects(t, enc, objects), rec.categories);
  Var<S> total = ad::add(ad::scale(l_t, static_cast<S>(tcfg.lambda1)), ad::scale(l_v, static_cast<S>(tcfg.lambda2)));
  if (l_ref.valid()) total = ad::add(total, l_ref);
  if (l_br.valid()) total = ad::add(total, ad::scale(l_br, static_cast<S>(tcfg.lambda3)));
  if (l_nr.valid()) total = ad::add(total, ad::scale(l_nr, static_cast<S>(tcfg.lambda3)));
  res.loss = total;
  auto val = [](Var<S> v) { return v.valid() ? static_cast<double>(v.scalar()) : 0.0; };
  res.parts = {val(l_ref), val(l_t), val(l_v), val(l_br), val(l_nr)};
  return res;
}

}  // namespace b2n
