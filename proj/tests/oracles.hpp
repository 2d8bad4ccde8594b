#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "b2n3d/graph_grounding.hpp"
#include "b2n3d/predicates.hpp"
#include "b2n3d/scene.hpp"

// Brute-force reference implementations used by the unit and acceptance tests. They favour
// obviousness over speed and share no code with the library's selection routines.
namespace b2n::testing {

/// Every off-diagonal (i, j), stably sorted by descending score; enumeration order
/// supplies the lexicographic tie-break.
inline std::vector<IndexPair> brute_top_pairs(const Eigen::MatrixXd& s, int k) {
  std::vector<std::pair<double, IndexPair>> all;
  for (int i = 0; i < s.rows(); ++i) {
    for (int j = 0; j < s.cols(); ++j) {
      if (i != j) all.push_back({s(i, j), {i, j}});
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<IndexPair> out;
  for (int r = 0; r < k && r < static_cast<int>(all.size()); ++r) out.push_back(all[static_cast<std::size_t>(r)].second);
  return out;
}

struct BruteCombo {
  int p, q;
  std::set<int> objects;
  double score;
};

/// scores(p, q) over the upper triangle of the K1 x K1 map. One entry per distinct object
/// set keeps the highest score (earliest (p, q) on ties); the survivors are ranked by
/// descending score then (p, q).
inline std::vector<BruteCombo> brute_top_combos(const std::vector<IndexPair>& pairs, const Eigen::MatrixXd& scores,
                                                int k) {
  std::vector<BruteCombo> all;
  for (int p = 0; p < static_cast<int>(pairs.size()); ++p) {
    for (int q = p; q < static_cast<int>(pairs.size()); ++q) {
      std::set<int> objs{pairs[p].i, pairs[p].j, pairs[q].i, pairs[q].j};
      all.push_back({p, q, objs, scores(p, q)});
    }
  }
  std::map<std::set<int>, BruteCombo> best;
  for (const auto& c : all) {
    auto it = best.find(c.objects);
    if (it == best.end() || c.score > it->second.score) best.insert_or_assign(c.objects, c);
  }
  std::vector<BruteCombo> kept;
  for (const auto& [objs, c] : best) kept.push_back(c);
  std::sort(kept.begin(), kept.end(), [](const BruteCombo& a, const BruteCombo& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::make_pair(a.p, a.q) < std::make_pair(b.p, b.q);
  });
  if (static_cast<int>(kept.size()) > k) kept.resize(static_cast<std::size_t>(k));
  return kept;
}

inline std::set<std::pair<int, int>> brute_clique_edges(const std::vector<std::set<int>>& combos) {
  std::set<std::pair<int, int>> edges;
  for (const auto& c : combos) {
    for (int a : c) {
      for (int b : c) {
        if (a < b) edges.insert({a, b});
      }
    }
  }
  return edges;
}

/// Dense masked graph attention with explicit loops: the same update rule as the layer,
/// written per node, per neighbour and per head.
inline Eigen::MatrixXd dense_gat(const Eigen::MatrixXd& h, const Eigen::MatrixXd& w, const Eigen::MatrixXd& a_src,
                                 const Eigen::MatrixXd& a_dst, const std::vector<std::vector<bool>>& nbr, int heads) {
  const int v = static_cast<int>(h.rows()), c = static_cast<int>(w.cols()), d = c / heads;
  const Eigen::MatrixXd wh = h * w;
  Eigen::MatrixXd out(v, c);
  for (int i = 0; i < v; ++i) {
    bool any = false;
    for (int j = 0; j < v; ++j) any = any || nbr[i][j];
    if (!any) {
      out.row(i) = h.row(i);
      continue;
    }
    for (int k = 0; k < heads; ++k) {
      std::vector<double> e(v, 0.0);
      double mx = -1e300;
      for (int j = 0; j < v; ++j) {
        if (!nbr[i][j]) continue;
        double s = 0.0;
        for (int x = 0; x < d; ++x) s += a_src(k, x) * wh(i, k * d + x) + a_dst(k, x) * wh(j, k * d + x);
        e[j] = s > 0 ? s : kGatSlope * s;
        mx = std::max(mx, e[j]);
      }
      double z = 0.0;
      for (int j = 0; j < v; ++j) {
        if (nbr[i][j]) z += std::exp(e[j] - mx);
      }
      for (int x = 0; x < d; ++x) {
        double acc = 0.0;
        for (int j = 0; j < v; ++j) {
          if (nbr[i][j]) acc += std::exp(e[j] - mx) / z * wh(j, k * d + x);
        }
        out(i, k * d + x) = acc > 0 ? acc : std::expm1(acc);
      }
    }
  }
  return out;
}

/// Referent oracle working from the record text alone: decodes the template sentence,
/// resolves each anchor name to the unique scene object of that category, and returns
/// every object of the subject category satisfying all clauses. An empty optional means
/// the text could not be decoded or an anchor name is ambiguous.
struct DecodedClause {
  RelationPredicate predicate;
  std::vector<int> anchors;
};

inline std::optional<std::vector<int>> brute_referents(const Record& rec) {
  const Scene& scene = rec.scene;
  auto resolve = [&](const std::string& name) -> int {
    int found = -1;
    for (const auto& o : scene.objects) {
      if (o.category != name) continue;
      if (found >= 0) return -2;
      found = o.id;
    }
    return found;
  };
  auto strip_the = [](std::string s) -> std::optional<std::string> {
    if (s.rfind("the ", 0) != 0) return std::nullopt;
    return s.substr(4);
  };
  auto decode_clause = [&](const std::string& s) -> std::optional<DecodedClause> {
    for (auto p : kAllPredicates) {
      const std::string phrase(predicate_phrase(p));
      if (s.rfind(phrase + " ", 0) != 0) continue;
      std::string rest = s.substr(phrase.size() + 1);
      std::vector<std::string> names;
      if (p == RelationPredicate::kBetween) {
        const auto sep = rest.find(" and ");
        if (sep == std::string::npos) return std::nullopt;
        names = {rest.substr(0, sep), rest.substr(sep + 5)};
      } else {
        names = {rest};
      }
      DecodedClause c{p, {}};
      for (const auto& n : names) {
        const auto bare = strip_the(n);
        if (!bare) return std::nullopt;
        const int id = resolve(*bare);
        if (id < 0) return std::nullopt;
        c.anchors.push_back(id);
      }
      return c;
    }
    return std::nullopt;
  };
  auto boxes = [&](const std::vector<int>& ids) {
    std::vector<Box3> out;
    for (int id : ids) out.push_back(scene.objects.at(static_cast<std::size_t>(id)).box);
    return out;
  };

  std::string text = rec.utterance.text;
  std::optional<DecodedClause> chain;
  if (const auto at = text.rfind(" that is "); at != std::string::npos) {
    chain = decode_clause(text.substr(at + 9));
    if (!chain) return std::nullopt;
    text.resize(at);
  }
  const auto subject_text = strip_the(text);
  if (!subject_text) return std::nullopt;
  text = *subject_text;
  std::string category;
  std::vector<DecodedClause> clauses;
  for (const auto& o : scene.objects) {
    const std::string& name = o.category;
    if (text.rfind(name + " ", 0) == 0 && name.size() > category.size()) category = name;
  }
  if (category.empty()) return std::nullopt;
  std::string body = text.substr(category.size() + 1);
  while (true) {
    const auto sep = body.find(", and ");
    const auto clause = decode_clause(body.substr(0, sep));
    if (!clause) return std::nullopt;
    clauses.push_back(*clause);
    if (sep == std::string::npos) break;
    body = body.substr(sep + 6);
  }
  // The chained clause must hold for the anchor it describes.
  if (chain) {
    const int head = clauses.back().anchors.back();
    if (!evaluate_predicate(chain->predicate, scene.objects.at(static_cast<std::size_t>(head)).box,
                            boxes(chain->anchors))) {
      return std::nullopt;
    }
  }
  std::vector<int> out;
  for (const auto& cand : scene.objects) {
    if (cand.category != category) continue;
    std::vector<Box3> competitors;
    for (const auto& o : scene.objects) {
      if (o.id != cand.id && o.category == category) competitors.push_back(o.box);
    }
    bool all = true;
    for (const auto& c : clauses) all = all && evaluate_predicate(c.predicate, cand.box, boxes(c.anchors), competitors);
    if (all) out.push_back(cand.id);
  }
  return out;
}

}  // namespace b2n::testing
