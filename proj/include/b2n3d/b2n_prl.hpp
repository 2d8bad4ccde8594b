#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "b2n3d/config.hpp"
#include "b2n3d/nn.hpp"
#include "b2n3d/relation_extraction.hpp"

// Binary-to-n-ary relational scoring: pair scores S1 over objects, combination scores S2
// over pairs of selected pairs, the two relational losses and top-K selection.
namespace b2n {

using ad::Matrix;
using ad::Tape;
using ad::Var;

inline constexpr double kLogClamp = 1e-7;

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// LN(q + MHA(q, T)) with T as the single key/value token.
struct CrossAttention {
  nn::MultiHeadAttention attention;
  nn::LayerNorm norm;

  template <typename S>
  static CrossAttention create(nn::Initializer<S>& init, const std::string& name, int dim, int heads) {
    return {nn::MultiHeadAttention::create(init, name + ".attn", dim, heads), nn::LayerNorm::create(init, name + ".norm", dim)};
  }

  template <typename S>
  Var<S> operator()(Tape<S>& t, Var<S> queries, Var<S> text, std::vector<Matrix<S>>* weights = nullptr) const {
    if (queries.cols() != text.cols()) {
      throw InputError("cross_attend: query dim " + std::to_string(queries.cols()) + " != text dim " +
                       std::to_string(text.cols()));
    }
    return norm(t, ad::add(queries, attention(t, queries, text, nullptr, weights)));
  }
};

template <typename S>
Var<S> cross_attend(Tape<S>& t, const CrossAttention& block, Var<S> queries, Var<S> text) {
  return block(t, queries, text);
}

struct IndexPair {
  int i = 0;
  int j = 0;
  auto operator<=>(const IndexPair&) const = default;
};

/// Union of the objects of two selected pairs; p <= q index the top-K1 list.
struct Combo {
  int p = 0;
  int q = 0;
  std::vector<int> objects;  // sorted, 2..4 entries
};

struct B2nPrl {
  CrossAttention binary_cross;
  nn::Mlp binary_score;  // C -> C -> 1
  CrossAttention nary_cross;
  nn::Mlp nary_score;

  template <typename S>
  static B2nPrl create(nn::Initializer<S>& init, const ModelConfig& cfg) {
    return {CrossAttention::create(init, "prl.cross1", cfg.dim, cfg.heads),
            nn::Mlp::create(init, "prl.score1", cfg.dim, cfg.hidden(), 1),
            CrossAttention::create(init, "prl.cross2", cfg.dim, cfg.heads),
            nn::Mlp::create(init, "prl.score2", cfg.dim, cfg.hidden(), 1)};
  }
};

// ---------------------------------------------------------------------------
// Selection

/// The k highest off-diagonal entries of an NxN score map, ties by (i, j).
template <typename Derived>
std::vector<IndexPair> select_top_pairs(const Eigen::MatrixBase<Derived>& scores, int k) {
  const int n = static_cast<int>(scores.rows());
  if (k > n * (n - 1)) {
    throw ConfigError("k1=" + std::to_string(k) + " exceeds the " + std::to_string(n * (n - 1)) + " off-diagonal pairs");
  }
  std::vector<IndexPair> all;
  all.reserve(static_cast<std::size_t>(n * (n - 1)));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i != j) all.push_back({i, j});
    }
  }
  auto better = [&](const IndexPair& a, const IndexPair& b) {
    const double sa = static_cast<double>(scores(a.i, a.j));
    const double sb = static_cast<double>(scores(b.i, b.j));
    if (sa != sb) return sa > sb;
    return a < b;
  };
  std::partial_sort(all.begin(), all.begin() + k, all.end(), better);
  all.resize(static_cast<std::size_t>(k));
  return all;
}

/// When no selected pair touches `target`, the last selected pair is replaced by the
/// best-scoring pair containing it. Returns whether a replacement happened.
template <typename Derived>
bool force_target_pair(std::vector<IndexPair>& selected, const Eigen::MatrixBase<Derived>& scores, int target) {
  for (const auto& p : selected) {
    if (p.i == target || p.j == target) return false;
  }
  if (selected.empty()) return false;
  const int n = static_cast<int>(scores.rows());
  IndexPair best{-1, -1};
  double best_score = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j || (i != target && j != target)) continue;
      const double s = static_cast<double>(scores(i, j));
      if (best.i < 0 || s > best_score) {
        best = {i, j};
        best_score = s;
      }
    }
  }
  if (best.i < 0) return false;
  selected.back() = best;
  return true;
}

/// Upper triangle (diagonal included) of the K1xK1 combination map, row-major in (p, q).
inline std::vector<Combo> enumerate_combos(const std::vector<IndexPair>& pairs) {
  std::vector<Combo> out;
  const int k = static_cast<int>(pairs.size());
  out.reserve(static_cast<std::size_t>(k * (k + 1) / 2));
  for (int p = 0; p < k; ++p) {
    for (int q = p; q < k; ++q) {
      const auto& a = pairs[static_cast<std::size_t>(p)];
      const auto& b = pairs[static_cast<std::size_t>(q)];
      std::vector<int> objs{a.i, a.j, b.i, b.j};
      std::sort(objs.begin(), objs.end());
      objs.erase(std::unique(objs.begin(), objs.end()), objs.end());
      out.push_back({p, q, std::move(objs)});
    }
  }
  return out;
}

/// One representative per distinct object set: the highest score, ties by (p, q).
/// Returned indices are in enumeration order.
inline std::vector<int> dedup_combos(const std::vector<Combo>& combos, std::span<const double> scores) {
  std::map<std::vector<int>, int> best;
  for (int c = 0; c < static_cast<int>(combos.size()); ++c) {
    auto [it, inserted] = best.emplace(combos[static_cast<std::size_t>(c)].objects, c);
    if (!inserted && scores[static_cast<std::size_t>(c)] > scores[static_cast<std::size_t>(it->second)]) it->second = c;
  }
  std::vector<int> out;
  out.reserve(best.size());
  for (const auto& [objs, c] : best) out.push_back(c);
  std::sort(out.begin(), out.end());
  return out;
}

/// Top-k deduplicated combinations by score, ties by (p, q).
inline std::vector<int> select_top_combos(const std::vector<Combo>& combos, std::span<const double> scores, int k) {
  std::vector<int> cand = dedup_combos(combos, scores);
  if (k > static_cast<int>(cand.size())) {
    throw ConfigError("k2=" + std::to_string(k) + " exceeds the " + std::to_string(cand.size()) +
                      " distinct combinations");
  }
  auto better = [&](int a, int b) {
    const double sa = scores[static_cast<std::size_t>(a)], sb = scores[static_cast<std::size_t>(b)];
    if (sa != sb) return sa > sb;
    return a < b;  // enumeration order is (p, q) lexicographic
  };
  const auto take = std::min<std::size_t>(static_cast<std::size_t>(std::max(k, 0)), cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(take), cand.end(), better);
  cand.resize(take);
  return cand;
}

inline bool combo_contains(const Combo& c, int object) {
  return std::binary_search(c.objects.begin(), c.objects.end(), object);
}

/// Same replacement rule as force_target_pair, applied to selected combinations.
inline bool force_target_combo(std::vector<int>& selected, const std::vector<Combo>& combos,
                               std::span<const double> scores, int target) {
  for (int c : selected) {
    if (combo_contains(combos[static_cast<std::size_t>(c)], target)) return false;
  }
  if (selected.empty()) return false;
  int best = -1;
  for (int c = 0; c < static_cast<int>(combos.size()); ++c) {
    if (!combo_contains(combos[static_cast<std::size_t>(c)], target)) continue;
    if (best < 0 || scores[static_cast<std::size_t>(c)] > scores[static_cast<std::size_t>(best)]) best = c;
  }
  if (best < 0) return false;
  selected.back() = best;
  return true;
}

struct ComboGroups {
  std::vector<int> pos;
  std::vector<int> neg;
};

inline ComboGroups group_combos(const std::vector<Combo>& combos, int target_id) {
  ComboGroups g;
  for (int c = 0; c < static_cast<int>(combos.size()); ++c) {
    (combo_contains(combos[static_cast<std::size_t>(c)], target_id) ? g.pos : g.neg).push_back(c);
  }
  return g;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean over all NxN cells of -[r log s + (1 - r) log(1 - s)], logs clamped at eps.
template <typename S>
double binary_loss(const Matrix<S>& s1, const Matrix<S>& r, double eps = kLogClamp) {
  if (s1.rows() != r.rows() || s1.cols() != r.cols()) throw InputError("binary_loss: shape mismatch");
  double total = 0.0;
  for (Eigen::Index k = 0; k < s1.size(); ++k) {
    const double s = static_cast<double>(s1.data()[k]);
    const double y = static_cast<double>(r.data()[k]);
    total -= y * std::log(std::max(s, eps)) + (1.0 - y) * std::log(std::max(1.0 - s, eps));
  }
  return total / static_cast<double>(s1.size());
}

/// Differentiable form on N*N x 1 logits; the diagonal is dropped when `mask_diagonal`.
template <typename S>
Var<S> binary_loss(Var<S> logits, const BinaryLabels& r, bool mask_diagonal = false, double eps = kLogClamp) {
  const int n = r.n;
  if (logits.rows() != static_cast<Eigen::Index>(n) * n || logits.cols() != 1) {
    throw InputError("binary_loss: expected " + std::to_string(n * n) + "x1 logits");
  }
  if (!mask_diagonal) {
    Matrix<S> target(n * n, 1);
    for (int k = 0; k < n * n; ++k) target(k, 0) = static_cast<S>(r.cells[static_cast<std::size_t>(k)]);
    return ad::bce_with_logits(logits, std::move(target), static_cast<S>(eps));
  }
  std::vector<int> rows;
  Matrix<S> target(n * (n - 1), 1);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j) continue;
      target(static_cast<Eigen::Index>(rows.size()), 0) = static_cast<S>(r.at(i, j));
      rows.push_back(i * n + j);
    }
  }
  return ad::bce_with_logits(ad::gather_rows(logits, std::move(rows)), std::move(target), static_cast<S>(eps));
}

/// (1/|neg|) sum_neg -log(1 - s) - log(max_pos s). Logs clamped at eps.
inline double nary_loss(std::span<const double> scores, const std::vector<int>& pos, const std::vector<int>& neg,
                        double eps = kLogClamp) {
  if (pos.empty()) throw ContractError("nary_loss: positive group is empty");
  double neg_term = 0.0;
  for (int c : neg) neg_term -= std::log(std::max(1.0 - scores[static_cast<std::size_t>(c)], eps));
  if (!neg.empty()) neg_term /= static_cast<double>(neg.size());
  double best = scores[static_cast<std::size_t>(pos[0])];
  for (int c : pos) best = std::max(best, scores[static_cast<std::size_t>(c)]);
  return neg_term - std::log(std::max(best, eps));
}

/// Differentiable form on Rx1 logits. Only the first maximal positive receives gradient
/// from the max term.
template <typename S>
Var<S> nary_loss(Var<S> logits, const std::vector<int>& pos, const std::vector<int>& neg, double eps = kLogClamp) {
  if (pos.empty()) throw ContractError("nary_loss: positive group is empty");
  Tape<S>& t = *logits.tape;
  const Matrix<S>& z = logits.value();
  const S e = static_cast<S>(eps);
  Matrix<S> dz = Matrix<S>::Zero(z.rows(), z.cols());
  S total = 0;
  const S inv_neg = neg.empty() ? S(0) : S(1) / static_cast<S>(neg.size());
  for (int c : neg) {
    S lp, lq;
    bool cp, cq;
    ad::clamped_log_sigmoids(z(c, 0), e, lp, lq, cp, cq);
    total -= lq * inv_neg;
    const S s = S(1) / (S(1) + std::exp(-z(c, 0)));
    if (!cq) dz(c, 0) += s * inv_neg;
  }
  int arg = pos[0];
  for (int c : pos) {
    if (z(c, 0) > z(arg, 0)) arg = c;
  }
  S lp, lq;
  bool cp, cq;
  ad::clamped_log_sigmoids(z(arg, 0), e, lp, lq, cp, cq);
  total -= lp;
  const S s = S(1) / (S(1) + std::exp(-z(arg, 0)));
  if (!cp) dz(arg, 0) -= S(1) - s;
  Matrix<S> out(1, 1);
  out(0, 0) = total;
  return t.push(std::move(out), t.requires_grad(logits.id), [logits, dz](Tape<S>& tp, int self) {
    tp.grad(logits.id) += dz * tp.grad(self)(0, 0);
  });
}

// ---------------------------------------------------------------------------
// Forward stages

template <typename S>
struct BinaryRelationState {
  Var<S> o_prime;    // N x C
  Var<S> relations;  // B, N*N x C, row i*N + j
  Var<S> logits;     // N*N x 1
  Matrix<S> s1;      // N x N sigmoid scores
  std::vector<IndexPair> topk1;
  bool forced = false;
};

template <typename S>
struct NaryRelationState {
  Var<S> refined;  // B', K1 x C
  Var<S> logits;   // R x 1 over the upper triangle
  std::vector<Combo> combos;
  std::vector<double> s2;  // R sigmoid scores
  std::vector<int> topk2;  // indices into combos
  bool forced = false;
};

/// B rows i*N + j = O'_i * O'_j + F_geo(i, j).
template <typename S>
Var<S> pairwise_relations(Var<S> o_prime, Var<S> f_geo) {
  const int n = static_cast<int>(o_prime.rows());
  if (f_geo.rows() != static_cast<Eigen::Index>(n) * n || f_geo.cols() != o_prime.cols()) {
    throw InputError("pairwise_relations: F_geo must be N*N x C");
  }
  std::vector<int> left, right;
  left.reserve(static_cast<std::size_t>(n * n));
  right.reserve(static_cast<std::size_t>(n * n));
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      left.push_back(i);
      right.push_back(j);
    }
  }
  return ad::add(ad::mul(ad::gather_rows(o_prime, std::move(left)), ad::gather_rows(o_prime, std::move(right))), f_geo);
}

template <typename S>
Matrix<S> sigmoid_values(const Matrix<S>& z) {
  return z.unaryExpr([](S v) { return S(1) / (S(1) + std::exp(-v)); });
}

/// Scores every ordered pair and selects the top k1. With `force_target` >= 0 the
/// selection is teacher-forced to contain that object. Ranking uses the logits, which
/// order identically to S1.
template <typename S>
BinaryRelationState<S> binary_relations(Tape<S>& t, const B2nPrl& prl, Var<S> objects, Var<S> f_box, Var<S> f_geo,
                                        Var<S> text, int k1, int force_target = -1) {
  const int n = static_cast<int>(objects.rows());
  BinaryRelationState<S> st;
  st.o_prime = prl.binary_cross(t, ad::add(objects, f_box), text);
  st.relations = pairwise_relations(st.o_prime, f_geo);
  st.logits = prl.binary_score(t, st.relations);
  Matrix<S> z = Eigen::Map<const Matrix<S>>(st.logits.value().data(), n, n);
  st.s1 = sigmoid_values(z);
  st.topk1 = select_top_pairs(z, k1);
  if (force_target >= 0) st.forced = force_target_pair(st.topk1, z, force_target);
  return st;
}

/// Relation rows of B for the selected pairs, in selection order.
template <typename S>
Var<S> selected_relations(const BinaryRelationState<S>& st, const std::vector<IndexPair>& pairs) {
  const int n = static_cast<int>(st.o_prime.rows());
  std::vector<int> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs) rows.push_back(p.i * n + p.j);
  return ad::gather_rows(st.relations, std::move(rows));
}

template <typename S>
NaryRelationState<S> nary_relations(Tape<S>& t, const B2nPrl& prl, const BinaryRelationState<S>& binary, Var<S> text,
                                    int k2, int force_target = -1) {
  if (binary.topk1.empty()) throw ContractError("nary_relations: no selected pairs");
  NaryRelationState<S> st;
  st.refined = prl.nary_cross(t, selected_relations(binary, binary.topk1), text);
  st.combos = enumerate_combos(binary.topk1);
  std::vector<int> left, right;
  for (const auto& c : st.combos) {
    left.push_back(c.p);
    right.push_back(c.q);
  }
  Var<S> m = ad::mul(ad::gather_rows(st.refined, std::move(left)), ad::gather_rows(st.refined, std::move(right)));
  st.logits = prl.nary_score(t, m);
  const Matrix<S>& z = st.logits.value();
  std::vector<double> rank(st.combos.size());
  st.s2.resize(st.combos.size());
  for (std::size_t c = 0; c < st.combos.size(); ++c) {
    rank[c] = static_cast<double>(z(static_cast<Eigen::Index>(c), 0));
    st.s2[c] = 1.0 / (1.0 + std::exp(-rank[c]));
  }
  st.topk2 = select_top_combos(st.combos, rank, k2);
  if (force_target >= 0) st.forced = force_target_combo(st.topk2, st.combos, rank, force_target);
  return st;
}

}  // namespace b2n
