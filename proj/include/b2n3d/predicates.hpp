#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>

#include "b2n3d/scene.hpp"

namespace b2n {

enum class RelationPredicate {
  kClosestTo,
  kFarthestFrom,
  kLeftOf,
  kRightOf,
  kBetween,
  kOnTopOf,
  kBelow,
  kNearestCornerOf,
};

inline constexpr std::array<RelationPredicate, 8> kAllPredicates = {
    RelationPredicate::kClosestTo, RelationPredicate::kFarthestFrom, RelationPredicate::kLeftOf,
    RelationPredicate::kRightOf,   RelationPredicate::kBetween,      RelationPredicate::kOnTopOf,
    RelationPredicate::kBelow,     RelationPredicate::kNearestCornerOf};

inline constexpr int arity(RelationPredicate p) { return p == RelationPredicate::kBetween ? 3 : 2; }

inline std::string_view predicate_name(RelationPredicate p) {
  switch (p) {
    case RelationPredicate::kClosestTo: return "closest_to";
    case RelationPredicate::kFarthestFrom: return "farthest_from";
    case RelationPredicate::kLeftOf: return "left_of";
    case RelationPredicate::kRightOf: return "right_of";
    case RelationPredicate::kBetween: return "between";
    case RelationPredicate::kOnTopOf: return "on_top_of";
    case RelationPredicate::kBelow: return "below";
    case RelationPredicate::kNearestCornerOf: return "nearest_corner_of";
  }
  return "?";
}

inline std::optional<RelationPredicate> predicate_from_name(std::string_view name) {
  for (auto p : kAllPredicates) {
    if (predicate_name(p) == name) return p;
  }
  return std::nullopt;
}

/// English phrase placed between the subject and the (first) anchor noun phrase.
inline std::string_view predicate_phrase(RelationPredicate p) {
  switch (p) {
    case RelationPredicate::kClosestTo: return "closest to";
    case RelationPredicate::kFarthestFrom: return "farthest from";
    case RelationPredicate::kLeftOf: return "to the left of";
    case RelationPredicate::kRightOf: return "to the right of";
    case RelationPredicate::kBetween: return "between";
    case RelationPredicate::kOnTopOf: return "on top of";
    case RelationPredicate::kBelow: return "below";
    case RelationPredicate::kNearestCornerOf: return "nearest the corner of";
  }
  return "?";
}

namespace detail {

inline double horizontal_distance(const Vec3& a, const Vec3& b) {
  return std::hypot(a[0] - b[0], a[1] - b[1]);
}

inline double corner_distance(const Box3& subject, const Box3& anchor) {
  double best = std::numeric_limits<double>::infinity();
  for (double sx : {-0.5, 0.5}) {
    for (double sy : {-0.5, 0.5}) {
      const Vec3 corner{anchor.center[0] + sx * anchor.size[0], anchor.center[1] + sy * anchor.size[1], 0.0};
      best = std::min(best, horizontal_distance(subject.center, corner));
    }
  }
  return best;
}

constexpr double kStackTolerance = 1e-6;
constexpr double kNoCompetitorSlack = 1e9;

}  // namespace detail

/// Signed distance to the predicate's decision boundary, in scene units: > 0 holds, <= 0 fails.
/// Superlative predicates (closest/farthest/nearest corner) compare the subject against the
/// same-category `competitors`. Stacking predicates are structural and return +1 / -1.
inline double predicate_slack(RelationPredicate pred, const Box3& subject, std::span<const Box3> anchors,
                              std::span<const Box3> competitors = {}) {
  if (static_cast<int>(anchors.size()) != arity(pred) - 1) {
    throw InputError(std::string("predicate ") + std::string(predicate_name(pred)) + " expects " +
                     std::to_string(arity(pred) - 1) + " anchor(s), got " + std::to_string(anchors.size()));
  }
  const Box3& a = anchors[0];
  switch (pred) {
    case RelationPredicate::kClosestTo: {
      double best = detail::kNoCompetitorSlack;
      const double own = center_distance(subject, a);
      for (const auto& c : competitors) best = std::min(best, center_distance(c, a) - own);
      return best;
    }
    case RelationPredicate::kFarthestFrom: {
      double best = detail::kNoCompetitorSlack;
      const double own = center_distance(subject, a);
      for (const auto& c : competitors) best = std::min(best, own - center_distance(c, a));
      return best;
    }
    case RelationPredicate::kLeftOf: return a.center[0] - subject.center[0];
    case RelationPredicate::kRightOf: return subject.center[0] - a.center[0];
    case RelationPredicate::kBetween: {
      const Box3& b = anchors[1];
      double len2 = 0.0;
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) {
        const double ab = b.center[k] - a.center[k];
        len2 += ab * ab;
        dot += (subject.center[k] - a.center[k]) * ab;
      }
      if (len2 <= 0.0) return -1.0;
      const double t = dot / len2;
      return std::min(t, 1.0 - t) * std::sqrt(len2);
    }
    case RelationPredicate::kOnTopOf: {
      const bool on = footprints_overlap(subject, a) && subject.min(2) >= a.max(2) - detail::kStackTolerance;
      return on ? 1.0 : -1.0;
    }
    case RelationPredicate::kBelow: {
      const bool under = footprints_overlap(subject, a) && subject.max(2) <= a.min(2) + detail::kStackTolerance;
      return under ? 1.0 : -1.0;
    }
    case RelationPredicate::kNearestCornerOf: {
      double best = detail::kNoCompetitorSlack;
      const double own = detail::corner_distance(subject, a);
      for (const auto& c : competitors) best = std::min(best, detail::corner_distance(c, a) - own);
      return best;
    }
  }
  return -1.0;
}

/// Deterministic truth value of `pred(subject, anchors...)`; left/right use the fixed frame (+x = right).
inline bool evaluate_predicate(RelationPredicate pred, const Box3& subject, std::span<const Box3> anchors,
                               std::span<const Box3> competitors = {}) {
  return predicate_slack(pred, subject, anchors, competitors) > 0.0;
}

}  // namespace b2n
