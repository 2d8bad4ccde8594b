#pragma once

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "b2n3d/dataset_io.hpp"
#include "b2n3d/predicates.hpp"
#include "b2n3d/rng.hpp"
#include "b2n3d/scene.hpp"

namespace b2n {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenConfig {
  int n_objects = 12;
  int n_categories = 6;
  int rn_min = 1;  // relations_per_utterance range, counted in category pairs
  int rn_max = 3;
  int min_distractors = 2;
  int extra_distractors = 1;  // distractor count is drawn from [min, min + extra]
  Vec3 scene_extent{10.0, 10.0, 3.0};
  std::uint64_t seed = 0;
  int max_retries = 1000;       // placement attempts per scene
  int max_phrase_attempts = 400;
  double margin = 0.25;         // generator-side robustness margin on predicate slack
  double stack_probability = 0.35;

  void validate() const {
    if (min_distractors < 0) throw ConfigError("min_distractors must be >= 0");
    if (n_objects < 2 * min_distractors || n_objects < 2) {
      throw ConfigError("n_objects must be >= 2 * min_distractors and >= 2");
    }
    if (n_objects > kDefaultMaxObjects) throw ConfigError("n_objects exceeds the scene cap");
    if (n_categories < 2) throw ConfigError("n_categories must be >= 2");
    if (rn_min < 1 || rn_max < rn_min) throw ConfigError("relations_per_utterance range is empty");
    if (extra_distractors < 0) throw ConfigError("extra_distractors must be >= 0");
    for (double e : scene_extent) {
      if (!(e > 0.0)) throw ConfigError("scene_extent must be positive");
    }
    if (max_retries < 1 || max_phrase_attempts < 1) throw ConfigError("retry bounds must be positive");
    // Target plus distractors plus at least one unique anchor category.
    if (n_objects < min_distractors + 2) throw ConfigError("n_objects too small for target, distractors and anchor");
  }

  Vocabulary vocabulary() const { return default_vocabulary(n_categories); }
};

namespace detail {

struct CategoryShape {
  Vec3 size;
  bool stackable;  // small enough to rest on furniture
};

inline CategoryShape category_shape(const std::string& name) {
  static const std::map<std::string, CategoryShape> kShapes = {
      {"chair", {{0.55, 0.55, 0.9}, false}},  {"table", {{1.6, 0.9, 0.75}, false}},
      {"desk", {{1.4, 0.7, 0.75}, false}},    {"lamp", {{0.3, 0.3, 0.5}, true}},
      {"box", {{0.45, 0.4, 0.35}, true}},     {"shelf", {{1.0, 0.4, 1.6}, false}},
      {"pillow", {{0.5, 0.4, 0.2}, true}},    {"couch", {{2.0, 0.9, 0.8}, false}},
      {"stool", {{0.4, 0.4, 0.6}, false}},    {"cabinet", {{0.9, 0.5, 1.0}, false}},
      {"door", {{0.9, 0.1, 2.0}, false}},     {"window", {{1.2, 0.1, 1.0}, false}},
      {"bed", {{2.0, 1.6, 0.6}, false}},      {"plant", {{0.4, 0.4, 0.7}, true}},
      {"monitor", {{0.6, 0.2, 0.45}, true}},  {"sink", {{0.6, 0.5, 0.9}, false}},
      {"whiteboard", {{1.5, 0.1, 1.0}, false}}, {"picture", {{0.6, 0.05, 0.5}, true}},
      {"backpack", {{0.35, 0.25, 0.45}, true}}, {"bookcase", {{1.0, 0.35, 1.9}, false}}};
  auto it = kShapes.find(name);
  if (it != kShapes.end()) return it->second;
  return {{0.6, 0.6, 0.6}, false};
}

inline std::vector<Box3> boxes_of(const Scene& scene) {
  std::vector<Box3> boxes;
  boxes.reserve(scene.objects.size());
  for (const auto& o : scene.objects) boxes.push_back(o.box);
  return boxes;
}

}  // namespace detail

/// Places `cfg.n_objects` non-overlapping boxes; the target's category has at least
/// `cfg.min_distractors` other instances and every other category is placed so that some
/// categories stay unique (usable as unambiguous anchors).
inline Scene generate_scene(const GenConfig& cfg, Rng& rng) {
  if (cfg.n_objects < 2 * cfg.min_distractors || cfg.n_objects < cfg.min_distractors + 2) {
    throw GenerationError("cannot place target, " + std::to_string(cfg.min_distractors) +
                          " distractors and an anchor in " + std::to_string(cfg.n_objects) + " objects");
  }
  cfg.validate();
  const Vocabulary vocab = cfg.vocabulary();
  const int n_cat = vocab.size();

  const int target_cat = uniform_int(rng, 0, n_cat - 1);
  const int max_d = std::min(cfg.min_distractors + cfg.extra_distractors, cfg.n_objects - 2);
  const int distractors = uniform_int(rng, cfg.min_distractors, std::max(cfg.min_distractors, max_d));

  std::vector<int> others;
  for (int c = 0; c < n_cat; ++c) {
    if (c != target_cat) others.push_back(c);
  }
  std::shuffle(others.begin(), others.end(), rng);

  std::vector<int> categories(static_cast<std::size_t>(distractors + 1), target_cat);
  const int remaining = cfg.n_objects - (distractors + 1);
  const int singles = std::min(remaining, static_cast<int>(others.size()));
  for (int i = 0; i < singles; ++i) categories.push_back(others[static_cast<std::size_t>(i)]);
  // Extras pile onto at most two categories so the rest stay unique.
  const int extras = remaining - singles;
  if (extras > 0) {
    const int pool = std::min(2, singles);
    for (int e = 0; e < extras; ++e) {
      const int pick = pool > 0 ? uniform_int(rng, 0, pool - 1) : 0;
      categories.push_back(pool > 0 ? others[static_cast<std::size_t>(pick)] : target_cat);
    }
  }
  std::shuffle(categories.begin(), categories.end(), rng);

  // Floor objects first so stackable objects can find supports.
  std::vector<int> order(categories.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return !detail::category_shape(vocab.name(categories[static_cast<std::size_t>(a)])).stackable &&
           detail::category_shape(vocab.name(categories[static_cast<std::size_t>(b)])).stackable;
  });

  std::vector<Box3> placed(categories.size());
  std::vector<bool> done(categories.size(), false);
  int attempts = 0;
  for (int idx : order) {
    const std::string& name = vocab.name(categories[static_cast<std::size_t>(idx)]);
    const auto shape = detail::category_shape(name);
    bool ok = false;
    while (!ok) {
      if (++attempts > cfg.max_retries) {
        throw GenerationError("placement failed after " + std::to_string(cfg.max_retries) + " retries");
      }
      Box3 box;
      for (int k = 0; k < 3; ++k) box.size[k] = shape.size[k] * uniform(rng, 0.8, 1.2);
      if (uniform(rng, 0.0, 1.0) < 0.5) std::swap(box.size[0], box.size[1]);

      bool stacked = false;
      if (shape.stackable && uniform(rng, 0.0, 1.0) < cfg.stack_probability) {
        std::vector<int> supports;
        for (std::size_t j = 0; j < placed.size(); ++j) {
          if (done[j] && !detail::category_shape(vocab.name(categories[j])).stackable &&
              placed[j].size[0] > box.size[0] && placed[j].size[1] > box.size[1] &&
              placed[j].max(2) + box.size[2] <= cfg.scene_extent[2]) {
            supports.push_back(static_cast<int>(j));
          }
        }
        if (!supports.empty()) {
          const Box3& s = placed[static_cast<std::size_t>(supports[static_cast<std::size_t>(
              uniform_int(rng, 0, static_cast<int>(supports.size()) - 1))])];
          for (int k = 0; k < 2; ++k) {
            const double slack = 0.5 * (s.size[k] - box.size[k]);
            box.center[k] = s.center[k] + uniform(rng, -slack, slack);
          }
          box.center[2] = s.max(2) + 0.5 * box.size[2];
          stacked = true;
        }
      }
      if (!stacked) {
        for (int k = 0; k < 2; ++k) {
          const double half = 0.5 * box.size[k];
          box.center[k] = uniform(rng, half, cfg.scene_extent[k] - half);
        }
        box.center[2] = 0.5 * box.size[2];
      }
      if (box.max(2) > cfg.scene_extent[2]) continue;
      ok = true;
      for (std::size_t j = 0; j < placed.size(); ++j) {
        if (done[j] && boxes_overlap(placed[j], box)) {
          ok = false;
          break;
        }
      }
      if (ok) {
        placed[static_cast<std::size_t>(idx)] = box;
        done[static_cast<std::size_t>(idx)] = true;
      }
    }
  }

  Scene scene;
  for (std::size_t i = 0; i < categories.size(); ++i) {
    scene.objects.push_back({static_cast<int>(i), vocab.name(categories[i]), placed[i]});
  }
  std::vector<int> candidates;
  for (const auto& o : scene.objects) {
    if (o.category == vocab.name(target_cat)) candidates.push_back(o.id);
  }
  scene.target_id = candidates[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(candidates.size()) - 1))];
  return scene;
}

/// One relational clause about the subject: predicate plus anchor object ids.
struct Clause {
  RelationPredicate predicate = RelationPredicate::kClosestTo;
  std::vector<int> anchors;
};

/// Structured form of a synthetic description. `chain`, when present, describes the
/// anchor of the last clause ("... the A that is left of the B").
struct Description {
  std::vector<Clause> clauses;
  std::optional<Clause> chain;
};

/// Objects of the subject's category that satisfy every clause (brute force over candidates).
inline std::vector<int> satisfying_objects(const Scene& scene, const std::string& category,
                                           const std::vector<Clause>& clauses) {
  std::vector<int> result;
  for (const auto& cand : scene.objects) {
    if (cand.category != category) continue;
    std::vector<Box3> competitors;
    for (const auto& o : scene.objects) {
      if (o.id != cand.id && o.category == category) competitors.push_back(o.box);
    }
    bool all = true;
    for (const auto& cl : clauses) {
      std::vector<Box3> anchors;
      for (int a : cl.anchors) anchors.push_back(scene.objects.at(static_cast<std::size_t>(a)).box);
      if (!evaluate_predicate(cl.predicate, cand.box, anchors, competitors)) {
        all = false;
        break;
      }
    }
    if (all) result.push_back(cand.id);
  }
  return result;
}

inline std::string render_description(const Scene& scene, const Description& d) {
  auto cat = [&](int id) { return scene.objects.at(static_cast<std::size_t>(id)).category; };
  auto clause_text = [&](const Clause& c) {
    std::string s(predicate_phrase(c.predicate));
    s += " the " + cat(c.anchors[0]);
    if (c.predicate == RelationPredicate::kBetween) s += " and the " + cat(c.anchors[1]);
    return s;
  };
  std::string text = "the " + scene.target().category;
  for (std::size_t i = 0; i < d.clauses.size(); ++i) {
    text += i == 0 ? " " : ", and ";
    text += clause_text(d.clauses[i]);
  }
  if (d.chain) text += " that is " + clause_text(*d.chain);
  return text;
}

inline SoftRelationalLabel description_label(const Scene& scene, const Description& d) {
  auto cat = [&](int id) { return scene.objects.at(static_cast<std::size_t>(id)).category; };
  SoftRelationalLabel label;
  const std::string& t = scene.target().category;
  for (const auto& c : d.clauses) {
    for (int a : c.anchors) label.pairs.insert(CategoryPair(t, cat(a)));
  }
  if (d.chain) {
    const int head = d.clauses.back().anchors.back();
    for (int a : d.chain->anchors) label.pairs.insert(CategoryPair(cat(head), cat(a)));
  }
  return label;
}

namespace detail {

inline bool robust_for_target(const Scene& scene, const Clause& c, double margin) {
  const auto& t = scene.target();
  std::vector<Box3> competitors;
  for (const auto& o : scene.objects) {
    if (o.id != t.id && o.category == t.category) competitors.push_back(o.box);
  }
  std::vector<Box3> anchors;
  for (int a : c.anchors) anchors.push_back(scene.objects.at(static_cast<std::size_t>(a)).box);
  return predicate_slack(c.predicate, t.box, anchors, competitors) >= margin;
}

/// Every distractor must fail at least one clause by `margin`.
inline bool distractors_robustly_excluded(const Scene& scene, const std::vector<Clause>& clauses, double margin) {
  const auto& t = scene.target();
  for (const auto& cand : scene.objects) {
    if (cand.id == t.id || cand.category != t.category) continue;
    std::vector<Box3> competitors;
    for (const auto& o : scene.objects) {
      if (o.id != cand.id && o.category == t.category) competitors.push_back(o.box);
    }
    bool excluded = false;
    for (const auto& c : clauses) {
      std::vector<Box3> anchors;
      for (int a : c.anchors) anchors.push_back(scene.objects.at(static_cast<std::size_t>(a)).box);
      if (predicate_slack(c.predicate, cand.box, anchors, competitors) <= -margin) {
        excluded = true;
        break;
      }
    }
    if (!excluded) return false;
  }
  return true;
}

}  // namespace detail

/// Picks a clause conjunction that singles out the target among its category, with `rn`
/// category pairs drawn from cfg's range. Anchors are restricted to objects whose category
/// is unique in the scene so that "the {A}" is unambiguous.
inline Utterance synthesize_utterance(const Scene& scene, const GenConfig& cfg, Rng& rng,
                                      Description* structure = nullptr) {
  const auto& target = scene.target();
  std::map<std::string, int> counts;
  for (const auto& o : scene.objects) ++counts[o.category];
  std::vector<int> anchors;
  for (const auto& o : scene.objects) {
    if (o.category != target.category && counts[o.category] == 1) anchors.push_back(o.id);
  }
  if (anchors.empty()) throw GenerationError("no unique-category anchor available");

  constexpr std::array<RelationPredicate, 7> kBinary = {
      RelationPredicate::kClosestTo, RelationPredicate::kFarthestFrom, RelationPredicate::kLeftOf,
      RelationPredicate::kRightOf,   RelationPredicate::kOnTopOf,      RelationPredicate::kBelow,
      RelationPredicate::kNearestCornerOf};
  constexpr std::array<RelationPredicate, 4> kChain = {RelationPredicate::kLeftOf, RelationPredicate::kRightOf,
                                                       RelationPredicate::kOnTopOf, RelationPredicate::kBelow};

  for (int attempt = 0; attempt < cfg.max_phrase_attempts; ++attempt) {
    const int rn = uniform_int(rng, cfg.rn_min, cfg.rn_max);
    // Each pair needs a distinct anchor category.
    if (rn > static_cast<int>(anchors.size())) continue;
    std::vector<int> pool = anchors;
    std::shuffle(pool.begin(), pool.end(), rng);
    std::size_t next = 0;

    Description d;
    int pairs = 0;
    // Optional chain consumes one pair; only when at least two pairs are requested.
    const bool use_chain = rn >= 2 && uniform(rng, 0.0, 1.0) < 0.25;
    const int clause_pairs = use_chain ? rn - 1 : rn;
    bool failed = false;
    while (pairs < clause_pairs) {
      const bool can_between = clause_pairs - pairs >= 2 && pool.size() - next >= 2;
      Clause c;
      if (can_between && uniform(rng, 0.0, 1.0) < 0.3) {
        c.predicate = RelationPredicate::kBetween;
        c.anchors = {pool[next], pool[next + 1]};
        next += 2;
        pairs += 2;
      } else {
        if (next >= pool.size()) {
          failed = true;
          break;
        }
        c.predicate = kBinary[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(kBinary.size()) - 1))];
        c.anchors = {pool[next]};
        next += 1;
        pairs += 1;
      }
      if (!detail::robust_for_target(scene, c, cfg.margin)) {
        failed = true;
        break;
      }
      d.clauses.push_back(std::move(c));
    }
    if (failed) continue;
    if (use_chain) {
      if (next >= pool.size() || d.clauses.back().predicate == RelationPredicate::kBetween) continue;
      const int head = d.clauses.back().anchors.back();
      Clause chain;
      chain.anchors = {pool[next]};
      std::vector<RelationPredicate> valid;
      for (auto p : kChain) {
        const std::vector<Box3> a{scene.objects[static_cast<std::size_t>(pool[next])].box};
        if (predicate_slack(p, scene.objects[static_cast<std::size_t>(head)].box, a) >= cfg.margin) valid.push_back(p);
      }
      if (valid.empty()) continue;
      chain.predicate = valid[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(valid.size()) - 1))];
      d.chain = std::move(chain);
    }

    const auto satisfiers = satisfying_objects(scene, target.category, d.clauses);
    if (satisfiers.size() != 1 || satisfiers.front() != target.id) continue;
    if (!detail::distractors_robustly_excluded(scene, d.clauses, cfg.margin)) continue;

    Utterance u;
    u.text = render_description(scene, d);
    u.label = description_label(scene, d);
    u.target_category = target.category;
    u.rn = static_cast<int>(u.label.pairs.size());
    if (u.rn != rn) continue;
    if (structure) *structure = std::move(d);
    return u;
  }
  throw GenerationError("no disambiguating description found");
}

struct DatasetStats {
  int count = 0;
  std::map<int, int> rn_histogram;
  std::map<std::string, int> predicate_histogram;
  int scene_regenerations = 0;
};

/// Record `index` of a dataset: independent rng stream, regenerating the scene until a
/// unique description exists.
inline Record generate_record(const GenConfig& cfg, std::uint64_t index, Description* structure = nullptr,
                              int* regenerations = nullptr) {
  const std::uint64_t seed = stream_seed(cfg.seed, index);
  Rng rng(seed);
  constexpr int kMaxSceneAttempts = 200;
  for (int attempt = 0; attempt < kMaxSceneAttempts; ++attempt) {
    Record r;
    try {
      r.scene = generate_scene(cfg, rng);
    } catch (const GenerationError&) {
      if (regenerations) ++*regenerations;
      continue;
    }
    r.scene.seed = seed;
    try {
      r.utterance = synthesize_utterance(r.scene, cfg, rng, structure);
      return r;
    } catch (const GenerationError&) {
      if (regenerations) ++*regenerations;
    }
  }
  throw GenerationError("record " + std::to_string(index) + ": no valid scene after " +
                        std::to_string(kMaxSceneAttempts) + " attempts");
}

inline std::vector<Record> generate_records(const GenConfig& cfg, int count, DatasetStats* stats = nullptr) {
  cfg.validate();
  std::vector<Record> records;
  records.reserve(static_cast<std::size_t>(std::max(count, 0)));
  DatasetStats local;
  for (int i = 0; i < count; ++i) {
    Description d;
    records.push_back(generate_record(cfg, static_cast<std::uint64_t>(i), &d, &local.scene_regenerations));
    ++local.count;
    ++local.rn_histogram[records.back().utterance.rn];
    for (const auto& c : d.clauses) ++local.predicate_histogram[std::string(predicate_name(c.predicate))];
    if (d.chain) ++local.predicate_histogram[std::string(predicate_name(d.chain->predicate))];
  }
  if (stats) *stats = local;
  return records;
}

inline DatasetStats generate_dataset(const GenConfig& cfg, int count, const std::string& path) {
  DatasetStats stats;
  const auto records = generate_records(cfg, count, &stats);
  write_dataset(path, records);
  return stats;
}

}  // namespace b2n
