#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace b2n {

using Vec3 = std::array<double, 3>;

class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Axis-aligned box given by center and full extent.
struct Box3 {
  Vec3 center{0.0, 0.0, 0.0};
  Vec3 size{1.0, 1.0, 1.0};

  double min(int axis) const { return center[axis] - 0.5 * size[axis]; }
  double max(int axis) const { return center[axis] + 0.5 * size[axis]; }
  double volume() const { return size[0] * size[1] * size[2]; }

  friend bool operator==(const Box3&, const Box3&) = default;
};

inline double center_distance(const Box3& a, const Box3& b) {
  const double dx = a.center[0] - b.center[0];
  const double dy = a.center[1] - b.center[1];
  const double dz = a.center[2] - b.center[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

/// True when the open boxes intersect with positive volume. Touching faces do not count.
inline bool boxes_overlap(const Box3& a, const Box3& b) {
  for (int k = 0; k < 3; ++k) {
    if (a.max(k) <= b.min(k) || b.max(k) <= a.min(k)) return false;
  }
  return true;
}

/// Footprints (x/y intervals) overlap with positive area.
inline bool footprints_overlap(const Box3& a, const Box3& b) {
  for (int k = 0; k < 2; ++k) {
    if (a.max(k) <= b.min(k) || b.max(k) <= a.min(k)) return false;
  }
  return true;
}

/// Fixed, ordered category vocabulary. Category ids index into `names`.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> names) : names_(std::move(names)) {}

  int size() const { return static_cast<int>(names_.size()); }
  const std::string& name(int id) const { return names_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::string>& names() const { return names_; }

  /// Exact lookup; -1 when absent.
  int find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return static_cast<int>(i);
    }
    return -1;
  }
  bool contains(const std::string& name) const { return find(name) >= 0; }

  friend bool operator==(const Vocabulary&, const Vocabulary&) = default;

 private:
  std::vector<std::string> names_;
};

/// Category names used by the synthetic generator; the first `n` form the default vocabulary.
inline const std::vector<std::string>& master_category_list() {
  static const std::vector<std::string> kNames = {
      "chair", "table", "desk",    "lamp",   "box",     "shelf",      "pillow",  "couch",
      "stool", "cabinet", "door",  "window", "bed",     "plant",      "monitor", "sink",
      "whiteboard", "picture", "backpack", "bookcase", "wall", "trash can", "refrigerator", "floor"};
  return kNames;
}

inline Vocabulary default_vocabulary(int n_categories) {
  const auto& all = master_category_list();
  if (n_categories < 1 || n_categories > static_cast<int>(all.size())) {
    throw ConfigError("n_categories must be in [1, " + std::to_string(all.size()) + "]");
  }
  return Vocabulary(std::vector<std::string>(all.begin(), all.begin() + n_categories));
}

struct ObjectProposal {
  int id = 0;
  std::string category;
  Box3 box;

  friend bool operator==(const ObjectProposal&, const ObjectProposal&) = default;
};

struct Scene {
  std::vector<ObjectProposal> objects;
  int target_id = 0;
  std::uint64_t seed = 0;

  int size() const { return static_cast<int>(objects.size()); }
  const ObjectProposal& target() const { return objects.at(static_cast<std::size_t>(target_id)); }

  /// Same-category objects other than the target.
  int distractor_count() const {
    int n = 0;
    for (const auto& o : objects) {
      if (o.id != target_id && o.category == target().category) ++n;
    }
    return n;
  }

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Unordered category pair, stored with first <= second.
struct CategoryPair {
  std::string first;
  std::string second;

  CategoryPair() = default;
  CategoryPair(std::string a, std::string b) {
    if (b < a) std::swap(a, b);
    first = std::move(a);
    second = std::move(b);
  }

  bool matches(const std::string& a, const std::string& b) const {
    return (first == a && second == b) || (first == b && second == a);
  }

  friend auto operator<=>(const CategoryPair&, const CategoryPair&) = default;
};

struct SoftRelationalLabel {
  std::set<CategoryPair> pairs;

  friend bool operator==(const SoftRelationalLabel&, const SoftRelationalLabel&) = default;
};

struct Utterance {
  std::string text;
  SoftRelationalLabel label;
  std::string target_category;
  int rn = 0;

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

/// One line of a dataset file.
struct Record {
  Scene scene;
  Utterance utterance;

  friend bool operator==(const Record&, const Record&) = default;
};

constexpr int kDefaultMaxObjects = 24;

/// Report-style validation; an empty result means the scene is well formed.
inline std::vector<std::string> validate_scene(const Scene& scene, const Vocabulary& vocab,
                                               int max_objects = kDefaultMaxObjects) {
  std::vector<std::string> violations;
  const int n = scene.size();
  if (n < 2) violations.push_back("fewer than 2 objects");
  if (n > max_objects) violations.push_back("more than " + std::to_string(max_objects) + " objects");
  for (int i = 0; i < n; ++i) {
    const auto& o = scene.objects[static_cast<std::size_t>(i)];
    const std::string where = "object " + std::to_string(i) + ": ";
    if (o.id != i) violations.push_back(where + "id not contiguous");
    if (!vocab.contains(o.category)) violations.push_back(where + "category '" + o.category + "' not in vocabulary");
    for (int k = 0; k < 3; ++k) {
      if (!std::isfinite(o.box.center[k])) {
        violations.push_back(where + "non-finite center");
        break;
      }
    }
    for (int k = 0; k < 3; ++k) {
      if (!(o.box.size[k] > 0.0) || !std::isfinite(o.box.size[k])) {
        violations.push_back(where + "non-positive size");
        break;
      }
    }
  }
  if (scene.target_id < 0 || scene.target_id >= n) violations.push_back("target out of range");
  return violations;
}

}  // namespace b2n
