#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "b2n3d/scene.hpp"

namespace b2n {

enum class ExtractionSource { kParser, kLlm };

struct ExtractionResult {
  std::set<CategoryPair> pairs;
  std::vector<std::string> unresolved;
  ExtractionSource source = ExtractionSource::kParser;
  std::vector<std::string> diagnostics;
};

class ExtractionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Entity canonicalization

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

inline std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

/// Rule-based English singularization of the last word.
inline std::string singularize(std::string_view word) {
  std::string w(word);
  auto ends = [&](std::string_view suf) { return w.size() > suf.size() && w.ends_with(suf); };
  if (ends("ves")) return w.substr(0, w.size() - 3) + "f";
  if (ends("ies")) return w.substr(0, w.size() - 3) + "y";
  if (ends("ches") || ends("shes") || ends("sses") || ends("xes")) return w.substr(0, w.size() - 2);
  if (ends("s") && !ends("ss") && !ends("us")) return w.substr(0, w.size() - 1);
  return w;
}

inline std::size_t edit_distance(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Levenshtein distance divided by the longer length; 0 for two empty strings.
inline double normalized_edit_distance(std::string_view a, std::string_view b) {
  const std::size_t len = std::max(a.size(), b.size());
  if (len == 0) return 0.0;
  return static_cast<double>(edit_distance(a, b)) / static_cast<double>(len);
}

constexpr double kDefaultCanonicalThreshold = 0.34;

struct Canonicalization {
  std::optional<std::string> category;  // empty when rejected
  std::string nearest;
  double distance = 1.0;
};

inline Canonicalization canonicalize_detailed(std::string_view name, const Vocabulary& vocab,
                                              double threshold = kDefaultCanonicalThreshold) {
  Canonicalization out;
  const std::string lowered = trim(to_lower(name));
  if (lowered.empty() || vocab.size() == 0) return out;
  const std::string single = singularize(lowered);
  for (const auto& candidate : {lowered, single}) {
    if (vocab.contains(candidate)) {
      out.category = candidate;
      out.nearest = candidate;
      out.distance = 0.0;
      return out;
    }
  }
  for (const auto& entry : vocab.names()) {
    const double d = std::min(normalized_edit_distance(single, entry), normalized_edit_distance(lowered, entry));
    if (d < out.distance) {
      out.distance = d;
      out.nearest = entry;
    }
  }
  if (out.distance <= threshold) out.category = out.nearest;
  return out;
}

/// Lowercase + singularize, then nearest vocabulary entry by normalized edit distance.
inline std::optional<std::string> canonicalize_entity(std::string_view name, const Vocabulary& vocab,
                                                      double threshold = kDefaultCanonicalThreshold) {
  return canonicalize_detailed(name, vocab, threshold).category;
}

// ---------------------------------------------------------------------------
// Template-language parser

/// Lexicon of the description language: determiners, relation phrases that introduce an
/// entity, and location phrases that do not.
struct TemplateGrammar {
  Vocabulary vocab;
  double threshold = kDefaultCanonicalThreshold;
  std::vector<std::vector<std::string>> relation_phrases = {
      {"to", "the", "left", "of"}, {"to", "the", "right", "of"}, {"nearest", "the", "corner", "of"},
      {"in", "front", "of"},       {"on", "top", "of"},          {"closest", "to"},
      {"farthest", "from"},        {"furthest", "from"},         {"next", "to"},
      {"close", "to"},             {"left", "of"},               {"right", "of"},
      {"away", "from"},            {"on"},                       {"below"},
      {"under"},                   {"underneath"},               {"above"},
      {"behind"},                  {"beside"},                   {"near"},
      {"with"},                    {"against"},                  {"by"},
      {"in"},                      {"at"}};
  std::vector<std::vector<std::string>> location_phrases = {
      {"on", "the", "left", "hand", "side"}, {"on", "the", "right", "hand", "side"},
      {"on", "the", "left", "side"},         {"on", "the", "right", "side"},
      {"on", "the", "left"},                 {"on", "the", "right"},
      {"in", "the", "middle"},               {"in", "the", "corner"}};
  std::vector<std::string> determiners = {"the", "a", "an", "one", "two", "three", "some", "this", "that", "other"};
  std::vector<std::string> pronouns = {"it", "them"};

  explicit TemplateGrammar(Vocabulary v = {}) : vocab(std::move(v)) {}
};

inline std::vector<std::string> tokenize_text(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) tokens.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || ch == '\'') {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (ch == ',') {
      flush();
      tokens.emplace_back(",");
    } else {
      flush();
    }
  }
  flush();
  return tokens;
}

namespace detail {

class RelationParser {
 public:
  RelationParser(const TemplateGrammar& g, std::vector<std::string> tokens) : g_(g), toks_(std::move(tokens)) {}

  ExtractionResult run() {
    res_.source = ExtractionSource::kParser;
    while (pos_ < toks_.size()) {
      const std::size_t before = pos_;
      parse_np(std::nullopt, std::nullopt, 0);
      if (pos_ == before) ++pos_;
      if (pos_ < toks_.size()) {
        res_.diagnostics.push_back("trailing input at token " + std::to_string(pos_) + " '" + toks_[pos_] + "'");
        // Continue with the remainder as a fresh noun phrase.
      }
    }
    return std::move(res_);
  }

 private:
  using Head = std::optional<std::string>;

  bool at(std::string_view t) const { return pos_ < toks_.size() && toks_[pos_] == t; }
  bool at_offset(std::size_t k, std::string_view t) const { return pos_ + k < toks_.size() && toks_[pos_ + k] == t; }

  std::size_t match_phrase(const std::vector<std::vector<std::string>>& phrases) const {
    std::size_t best = 0;
    for (const auto& p : phrases) {
      if (p.size() <= best || pos_ + p.size() > toks_.size()) continue;
      bool ok = true;
      for (std::size_t k = 0; k < p.size(); ++k) {
        if (toks_[pos_ + k] != p[k]) {
          ok = false;
          break;
        }
      }
      if (ok) best = p.size();
    }
    return best;
  }
  std::size_t relation_len() const { return match_phrase(g_.relation_phrases); }
  std::size_t location_len() const { return match_phrase(g_.location_phrases); }
  bool at_between() const { return at("between"); }
  bool at_relative_marker() const {
    return (at("that") || at("which")) && (at_offset(1, "is") || at_offset(1, "are"));
  }
  bool at_clause_start() const {
    return location_len() > 0 || relation_len() > 0 || at_between() || at_relative_marker();
  }
  bool is_determiner(const std::string& t) const {
    return std::find(g_.determiners.begin(), g_.determiners.end(), t) != g_.determiners.end();
  }
  bool is_pronoun(const std::string& t) const {
    return std::find(g_.pronouns.begin(), g_.pronouns.end(), t) != g_.pronouns.end();
  }

  void add_pair(const Head& a, const Head& b) {
    if (a && b) res_.pairs.insert(CategoryPair(*a, *b));
  }

  // NP := det* (adj)* noun clause*
  // `owner` is the head this NP hangs off; a pronoun inside it refers to `antecedent`
  // (the owner's own parent), never to the owner itself.
  Head parse_np(const Head& owner, const Head& antecedent, int depth) {
    Head head;
    std::vector<std::string> skipped;
    bool pronoun = false;
    while (pos_ < toks_.size()) {
      const std::string& t = toks_[pos_];
      if (t == "," || t == "and" || at_clause_start()) break;
      if (is_determiner(t)) {
        ++pos_;
        continue;
      }
      if (is_pronoun(t) && skipped.empty()) {
        ++pos_;
        head = antecedent;
        pronoun = true;
        break;
      }
      if (pos_ + 1 < toks_.size()) {
        // Multi-word categories ("trash can") only match exactly.
        const std::string two = t + " " + singularize(toks_[pos_ + 1]);
        if (g_.vocab.contains(two)) {
          head = two;
          pos_ += 2;
          break;
        }
      }
      if (auto c = canonicalize_entity(t, g_.vocab, g_.threshold)) {
        head = c;
        ++pos_;
        break;
      }
      skipped.push_back(t);
      ++pos_;
    }
    if (!head && !pronoun) {
      for (auto& s : skipped) res_.unresolved.push_back(s);
    }
    parse_clauses(head, owner, depth);
    return head;
  }

  // clause* attached to `head`; a ", and" or "," hands control back to depth 0.
  void parse_clauses(const Head& head, const Head& owner, int depth) {
    while (pos_ < toks_.size()) {
      if (at(",")) {
        if (depth > 0) return;
        ++pos_;
        if (at("and")) ++pos_;
        continue;
      }
      if (at("and")) {
        // Coordination at this level only when another clause follows.
        ++pos_;
        if (at_clause_start()) continue;
        --pos_;
        return;
      }
      if (at_relative_marker()) {
        pos_ += 2;
        continue;
      }
      if (const std::size_t n = location_len(); n > 0) {
        pos_ += n;
        continue;
      }
      if (at_between()) {
        ++pos_;
        const Head a = parse_np(head, owner, depth + 1);
        add_pair(head, a);
        if (at("and")) {
          ++pos_;
          const Head b = parse_np(head, owner, depth + 1);
          add_pair(head, b);
        } else {
          res_.diagnostics.push_back("'between' without 'and'");
        }
        continue;
      }
      if (const std::size_t n = relation_len(); n > 0) {
        pos_ += n;
        const Head child = parse_np(head, owner, depth + 1);
        add_pair(head, child);
        continue;
      }
      // Unknown filler word ("is", adjectives after the noun).
      res_.diagnostics.push_back("skipped '" + toks_[pos_] + "'");
      ++pos_;
    }
  }

  const TemplateGrammar& g_;
  std::vector<std::string> toks_;
  std::size_t pos_ = 0;
  ExtractionResult res_;
};

}  // namespace detail

/// Recursive-descent extraction of unordered category pairs from description text.
/// Clauses attach to the nearest preceding noun; ", and" returns to the subject; "and"
/// before another clause coordinates at the current level; pronouns refer to the noun the
/// enclosing clause hangs off.
inline ExtractionResult parse_relations(std::string_view text, const TemplateGrammar& grammar) {
  return detail::RelationParser(grammar, tokenize_text(text)).run();
}

// ---------------------------------------------------------------------------
// LLM reply handling (transport lives in llm_client.hpp)

inline std::string relation_prompt(std::string_view description) {
  return "Find all of the binary relationships between entities in the input: " + std::string(description);
}

/// Parses a reply of the form "(a-b, c-d)" and canonicalizes every entity name.
inline ExtractionResult parse_llm_reply(std::string_view reply, const Vocabulary& vocab,
                                        double threshold = kDefaultCanonicalThreshold) {
  const auto open = reply.find('(');
  const auto close = reply.rfind(')');
  if (open == std::string_view::npos || close == std::string_view::npos || close < open) {
    throw ExtractionError("malformed reply: expected '(a-b, c-d)'");
  }
  ExtractionResult res;
  res.source = ExtractionSource::kLlm;
  const std::string_view body = reply.substr(open + 1, close - open - 1);
  std::size_t start = 0;
  while (start <= body.size()) {
    std::size_t end = body.find(',', start);
    if (end == std::string_view::npos) end = body.size();
    const std::string item = trim(body.substr(start, end - start));
    start = end + 1;
    if (item.empty()) {
      if (end == body.size()) break;
      continue;
    }
    const auto dash = item.find('-');
    if (dash == std::string::npos) {
      res.diagnostics.push_back("item without '-': " + item);
      if (end == body.size()) break;
      continue;
    }
    const std::string a = trim(item.substr(0, dash));
    const std::string b = trim(item.substr(dash + 1));
    const auto ca = canonicalize_entity(a, vocab, threshold);
    const auto cb = canonicalize_entity(b, vocab, threshold);
    if (!ca) res.unresolved.push_back(to_lower(a));
    if (!cb) res.unresolved.push_back(to_lower(b));
    if (ca && cb) res.pairs.insert(CategoryPair(*ca, *cb));
    if (end == body.size()) break;
  }
  if (res.pairs.empty()) throw ExtractionError("empty pair set");
  return res;
}

// ---------------------------------------------------------------------------
// Instance-level binary labels

/// Dense N x N 0/1 matrix, row-major.
struct BinaryLabels {
  int n = 0;
  std::vector<std::uint8_t> cells;

  std::uint8_t at(int i, int j) const { return cells[static_cast<std::size_t>(i * n + j)]; }
  int count() const {
    int c = 0;
    for (auto v : cells) c += v;
    return c;
  }
};

/// r[i][j] = 1 iff i != j and (category(i), category(j)) matches an unordered label pair.
inline BinaryLabels pairs_to_binary_labels(const std::set<CategoryPair>& pairs, const Scene& scene) {
  BinaryLabels r;
  r.n = scene.size();
  r.cells.assign(static_cast<std::size_t>(r.n * r.n), 0);
  for (int i = 0; i < r.n; ++i) {
    for (int j = 0; j < r.n; ++j) {
      if (i == j) continue;
      const auto& ci = scene.objects[static_cast<std::size_t>(i)].category;
      const auto& cj = scene.objects[static_cast<std::size_t>(j)].category;
      for (const auto& p : pairs) {
        if (p.matches(ci, cj)) {
          r.cells[static_cast<std::size_t>(i * r.n + j)] = 1;
          break;
        }
      }
    }
  }
  return r;
}

}  // namespace b2n
