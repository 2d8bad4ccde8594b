#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "b2n3d/config.hpp"
#include "b2n3d/nn.hpp"
#include "b2n3d/relation_extraction.hpp"
#include "b2n3d/scene.hpp"

namespace b2n {

using ad::Matrix;
using ad::Tape;
using ad::Var;

/// Word-level token ids; id 0 is reserved for unknown words.
class TokenVocabulary {
 public:
  TokenVocabulary() : tokens_{"<unk>"} {}
  explicit TokenVocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.empty() || tokens_[0] != "<unk>") tokens_.insert(tokens_.begin(), "<unk>");
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = static_cast<int>(i);
  }

  static TokenVocabulary build(const std::vector<std::string>& texts) {
    std::set<std::string> seen;
    for (const auto& t : texts) {
      for (auto& tok : tokenize_text(t)) seen.insert(tok);
    }
    return TokenVocabulary(std::vector<std::string>(seen.begin(), seen.end()));
  }

  int size() const { return static_cast<int>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> encode(const std::string& text, int max_tokens) const {
    std::vector<int> ids;
    for (const auto& tok : tokenize_text(text)) {
      if (static_cast<int>(ids.size()) >= max_tokens) break;
      auto it = index_.find(tok);
      ids.push_back(it == index_.end() ? 0 : it->second);
    }
    return ids;
  }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

/// Raw 6-vector (center, size) of every box, one row per object.
inline Matrix<double> box_parameters(const std::vector<Box3>& boxes) {
  Matrix<double> m(static_cast<Eigen::Index>(boxes.size()), 6);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      m(static_cast<Eigen::Index>(i), k) = boxes[i].center[k];
      m(static_cast<Eigen::Index>(i), 3 + k) = boxes[i].size[k];
    }
  }
  return m;
}

/// Signed vertical gap: positive when i rests above j, negative when below, 0 when the
/// z-intervals overlap.
inline double vertical_gap(const Box3& i, const Box3& j) {
  if (i.min(2) >= j.max(2)) return i.min(2) - j.max(2);
  if (j.min(2) >= i.max(2)) return -(j.min(2) - i.max(2));
  return 0.0;
}

/// Raw pairwise descriptor g(i, j) = [c_i - c_j (3), |c_i - c_j|, log(vol_i / vol_j), vertical gap],
/// row i * N + j.
inline Matrix<double> pairwise_geometry_raw(const std::vector<Box3>& boxes) {
  const auto n = static_cast<Eigen::Index>(boxes.size());
  Matrix<double> g(n * n, 6);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      const Box3& a = boxes[static_cast<std::size_t>(i)];
      const Box3& b = boxes[static_cast<std::size_t>(j)];
      const Eigen::Index r = i * n + j;
      for (int k = 0; k < 3; ++k) g(r, k) = a.center[k] - b.center[k];
      g(r, 3) = i == j ? 0.0 : center_distance(a, b);
      g(r, 4) = i == j ? 0.0 : std::log(a.volume() / b.volume());
      g(r, 5) = i == j ? 0.0 : vertical_gap(a, b);
    }
  }
  return g;
}

inline Matrix<double> sinusoidal_positions(int length, int dim) {
  Matrix<double> pe(length, dim);
  for (int p = 0; p < length; ++p) {
    for (int i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(dim));
      pe(p, i) = (i % 2 == 0) ? std::sin(p * freq) : std::cos(p * freq);
    }
  }
  return pe;
}

/// Parameters of the object, box, geometry and text encoders plus the auxiliary heads.
struct Encoders {
  int category_embed_3d = -1;  // |vocab| x C
  int category_embed_2d = -1;  // |vocab| x C2
  nn::Mlp box_mlp;             // 6 -> C -> C
  nn::Linear phi;              // C2 -> C
  nn::Mlp fuse_mlp;            // C -> C -> C
  nn::Linear box_embed;        // 6 -> C
  nn::Linear geo_embed;        // 6 -> C
  int token_embed = -1;        // |tokens| x C
  std::vector<nn::TransformerLayer> text_layers;
  nn::Linear text_head;        // C -> |vocab|
  nn::Linear object_head;      // C -> |vocab|

  template <typename S>
  static Encoders create(nn::Initializer<S>& init, const ModelConfig& cfg, int n_categories, int n_tokens) {
    const int c = cfg.dim;
    Encoders e;
    e.category_embed_3d = init.normal("enc.category3d", n_categories, c, 1.0);
    e.category_embed_2d = init.normal("enc.category2d", n_categories, cfg.dim2d, 1.0);
    e.box_mlp = nn::Mlp::create(init, "enc.box_mlp", 6, c, c);
    e.phi = nn::Linear::create(init, "enc.phi", cfg.dim2d, c);
    e.fuse_mlp = nn::Mlp::create(init, "enc.fuse", c, cfg.hidden(), c);
    e.box_embed = nn::Linear::create(init, "enc.box_embed", 6, c);
    e.geo_embed = nn::Linear::create(init, "enc.geo_embed", 6, c);
    e.token_embed = init.normal("enc.token_embed", n_tokens, c, 1.0);
    for (int l = 0; l < cfg.text_layers; ++l) {
      e.text_layers.push_back(nn::TransformerLayer::create(init, "enc.text." + std::to_string(l), c, cfg.heads));
    }
    e.text_head = nn::Linear::create(init, "enc.text_head", c, n_categories);
    e.object_head = nn::Linear::create(init, "enc.object_head", c, n_categories);
    return e;
  }
};

/// O = MLP(phi(f2d) + f3d) + f3d; the residual keeps the 3D features intact.
template <typename S>
Var<S> fuse_object_features(Tape<S>& t, const Encoders& enc, Var<S> f2d, Var<S> f3d) {
  if (f2d.rows() != f3d.rows()) {
    throw InputError("fuse_object_features: row count mismatch " + std::to_string(f2d.rows()) + " vs " +
                     std::to_string(f3d.rows()));
  }
  Var<S> mixed = ad::add(enc.phi(t, f2d), f3d);
  return ad::add(enc.fuse_mlp(t, mixed), f3d);
}

template <typename S>
struct ToyFeatures {
  Var<S> f2d;
  Var<S> f3d;
};

/// Stand-in object encoders: f3d = category embedding + MLP(box) + sigma * noise,
/// f2d = an independent category embedding.
template <typename S>
ToyFeatures<S> toy_object_features(Tape<S>& t, const Encoders& enc, const std::vector<int>& categories,
                                   const Matrix<S>& box_params, S noise_sigma, std::mt19937_64* noise_rng) {
  const auto n = static_cast<Eigen::Index>(categories.size());
  Var<S> cat3 = ad::gather_rows(t.param(enc.category_embed_3d), categories);
  Var<S> cat2 = ad::gather_rows(t.param(enc.category_embed_2d), categories);
  Var<S> box = enc.box_mlp(t, t.constant(box_params));
  Var<S> f3d = ad::add(cat3, box);
  if (noise_sigma > S(0) && noise_rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<S> noise(n, f3d.cols());
    for (Eigen::Index i = 0; i < noise.size(); ++i) noise.data()[i] = noise_sigma * static_cast<S>(dist(*noise_rng));
    f3d = ad::add(f3d, t.constant(std::move(noise)));
  }
  return {cat2, f3d};
}

/// F_box: linear map of the (scaled) 6-vector (center, size).
template <typename S>
Var<S> embed_box(Tape<S>& t, const Encoders& enc, const Matrix<S>& box_params) {
  return enc.box_embed(t, t.constant(box_params));
}

/// F_geo: learned linear map of the raw pairwise descriptors, N*N x C.
template <typename S>
Var<S> pairwise_geometry(Tape<S>& t, const Encoders& enc, const Matrix<S>& raw_scaled) {
  return enc.geo_embed(t, t.constant(raw_scaled));
}

template <typename S>
struct TextEncoding {
  Var<S> feature;  // 1 x C
  Var<S> logits;   // 1 x |vocab|
};

template <typename S>
TextEncoding<S> encode_text(Tape<S>& t, const Encoders& enc, const std::vector<int>& token_ids, S dropout = S(0),
                            std::mt19937_64* rng = nullptr) {
  if (token_ids.empty()) throw InputError("encode_text: empty text");
  const int dim = static_cast<int>(t.value(t.param(enc.token_embed).id).cols());
  Var<S> x = ad::gather_rows(t.param(enc.token_embed), token_ids);
  x = ad::add(x, t.constant(sinusoidal_positions(static_cast<int>(token_ids.size()), dim).template cast<S>()));
  for (const auto& layer : enc.text_layers) x = layer(t, x, dropout, rng);
  Var<S> feature = ad::mean_rows(x);
  return {feature, enc.text_head(t, feature)};
}

/// N x |vocab| logits for the object classification loss.
template <typename S>
Var<S> classify_objects(Tape<S>& t, const Encoders& enc, Var<S> objects) {
  return enc.object_head(t, objects);
}

}  // namespace b2n
