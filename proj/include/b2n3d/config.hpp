#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include "b2n3d/scene.hpp"
#include "b2n3d/synthetic.hpp"

namespace b2n {

enum class Ablation { kFull, kBinaryOnly, kFullyConnected, kNoGraph };

inline std::string_view ablation_name(Ablation a) {
  switch (a) {
    case Ablation::kFull: return "full";
    case Ablation::kBinaryOnly: return "binary_only";
    case Ablation::kFullyConnected: return "fully_connected";
    case Ablation::kNoGraph: return "no_graph";
  }
  return "?";
}

inline Ablation parse_ablation(std::string_view s) {
  for (auto a : {Ablation::kFull, Ablation::kBinaryOnly, Ablation::kFullyConnected, Ablation::kNoGraph}) {
    if (ablation_name(a) == s) return a;
  }
  throw ConfigError("unknown ablation '" + std::string(s) + "'");
}

struct ModelConfig {
  int dim = 128;
  int dim2d = 64;
  int heads = 8;
  int k1 = 16;
  int k2 = 16;
  int mlp_hidden = 0;  // 0: same as dim
  double dropout = 0.1;
  double noise_sigma = 0.1;
  int text_layers = 2;
  int max_tokens = 48;
  double geometry_scale = 5.0;  // scene units per unit of encoder input
  bool gat_self_loop = true;
  bool lref_over_all_objects = false;
  bool mask_lbr_diagonal = false;
  bool relation_token_mask = true;
  bool teacher_forcing = true;

  int hidden() const { return mlp_hidden > 0 ? mlp_hidden : dim; }

  void validate() const {
    if (dim <= 0 || dim2d <= 0) throw ConfigError("dim and dim2d must be positive");
    if (heads <= 0 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
    if (k1 <= 0 || k2 <= 0) throw ConfigError("k1 and k2 must be positive");
    if (k2 > k1 * (k1 + 1) / 2) throw ConfigError("k2 exceeds k1*(k1+1)/2 pairwise combinations");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
    if (text_layers < 0 || max_tokens <= 0) throw ConfigError("text encoder sizes invalid");
    if (!(geometry_scale > 0.0)) throw ConfigError("geometry_scale must be positive");
  }

  /// K1 must fit the off-diagonal pairs of an n-object scene.
  void validate_for_scene(int n) const {
    if (k1 > n * (n - 1)) {
      throw ConfigError("k1=" + std::to_string(k1) + " exceeds N(N-1)=" + std::to_string(n * (n - 1)));
    }
  }
};

struct TrainConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.5;
  double lambda3 = 2.0;
  int batch_size = 20;
  int epochs = 60;
  double lr0 = 5e-4;
  double decay = 0.65;
  int decay_every = 10;
  int decay_start = 30;
  int decay_end = 80;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global norm; 0 disables
  std::uint64_t seed = 1;
  Ablation ablation = Ablation::kFull;
  int hard_threshold = 2;
  int max_train_records = 0;  // 0: all
  int log_every = 0;          // batches; 0: per epoch only

  void validate() const {
    if (lambda1 < 0 || lambda2 < 0 || lambda3 < 0) throw ConfigError("loss weights must be non-negative");
    if (batch_size <= 0 || epochs < 0) throw ConfigError("batch_size must be positive and epochs non-negative");
    if (!(lr0 > 0.0) || !(decay > 0.0) || decay_every <= 0) throw ConfigError("schedule constants must be positive");
    if (hard_threshold < 0) throw ConfigError("hard_threshold must be >= 0");
  }
};

/// All sections of one key-value configuration file.
struct ConfigBundle {
  ModelConfig model;
  TrainConfig train;
  GenConfig gen;
};

namespace detail {

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("key '" + key + "': expected boolean, got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T x{};
  in >> x;
  if (!in || !(in >> std::ws).eof()) throw ConfigError("key '" + key + "': cannot parse '" + v + "'");
  return x;
}

}  // namespace detail

/// Applies `key = value` assignments; unknown keys are rejected.
inline void apply_setting(ConfigBundle& c, const std::string& key, const std::string& value) {
  using detail::parse_bool;
  using detail::parse_number;
  auto i = [&](int& dst) { dst = parse_number<int>(key, value); };
  auto d = [&](double& dst) { dst = parse_number<double>(key, value); };
  auto b = [&](bool& dst) { dst = parse_bool(key, value); };
  // model
  if (key == "dim") return i(c.model.dim);
  if (key == "dim2d") return i(c.model.dim2d);
  if (key == "heads") return i(c.model.heads);
  if (key == "k1") return i(c.model.k1);
  if (key == "k2") return i(c.model.k2);
  if (key == "mlp_hidden") return i(c.model.mlp_hidden);
  if (key == "dropout") return d(c.model.dropout);
  if (key == "noise_sigma") return d(c.model.noise_sigma);
  if (key == "text_layers") return i(c.model.text_layers);
  if (key == "max_tokens") return i(c.model.max_tokens);
  if (key == "geometry_scale") return d(c.model.geometry_scale);
  if (key == "gat_self_loop") return b(c.model.gat_self_loop);
  if (key == "lref_over_all_objects") return b(c.model.lref_over_all_objects);
  if (key == "mask_lbr_diagonal") return b(c.model.mask_lbr_diagonal);
  if (key == "relation_token_mask") return b(c.model.relation_token_mask);
  if (key == "teacher_forcing") return b(c.model.teacher_forcing);
  // training
  if (key == "lambda1") return d(c.train.lambda1);
  if (key == "lambda2") return d(c.train.lambda2);
  if (key == "lambda3") return d(c.train.lambda3);
  if (key == "batch_size") return i(c.train.batch_size);
  if (key == "epochs") return i(c.train.epochs);
  if (key == "lr0" || key == "lr") return d(c.train.lr0);
  if (key == "decay") return d(c.train.decay);
  if (key == "decay_every") return i(c.train.decay_every);
  if (key == "decay_start") return i(c.train.decay_start);
  if (key == "decay_end") return i(c.train.decay_end);
  if (key == "grad_clip") return d(c.train.grad_clip);
  if (key == "seed") {
    c.train.seed = parse_number<std::uint64_t>(key, value);
    c.gen.seed = c.train.seed;
    return;
  }
  if (key == "ablation") {
    c.train.ablation = parse_ablation(value);
    return;
  }
  if (key == "hard_threshold") return i(c.train.hard_threshold);
  if (key == "max_train_records") return i(c.train.max_train_records);
  if (key == "log_every") return i(c.train.log_every);
  // generator
  if (key == "n_objects") return i(c.gen.n_objects);
  if (key == "n_categories") return i(c.gen.n_categories);
  if (key == "rn_min") return i(c.gen.rn_min);
  if (key == "rn_max") return i(c.gen.rn_max);
  if (key == "min_distractors") return i(c.gen.min_distractors);
  if (key == "extra_distractors") return i(c.gen.extra_distractors);
  if (key == "gen_seed") {
    c.gen.seed = parse_number<std::uint64_t>(key, value);
    return;
  }
  if (key == "relations_per_utterance") {
    // "lo..hi" or a single count
    const auto dots = value.find("..");
    if (dots == std::string::npos) {
      c.gen.rn_min = c.gen.rn_max = parse_number<int>(key, value);
    } else {
      c.gen.rn_min = parse_number<int>(key, value.substr(0, dots));
      c.gen.rn_max = parse_number<int>(key, value.substr(dots + 2));
    }
    return;
  }
  if (key == "margin") return d(c.gen.margin);
  if (key == "stack_probability") return d(c.gen.stack_probability);
  if (key == "scene_extent") {
    std::istringstream in(value);
    for (auto& e : c.gen.scene_extent) {
      if (!(in >> e)) throw ConfigError("scene_extent expects three numbers");
    }
    return;
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

/// Inverse of parse_config for every key it accepts; doubles keep full precision.
inline std::string format_config(const ConfigBundle& c) {
  std::ostringstream out;
  out.precision(17);
  auto kv = [&](const char* k, const auto& v) { out << k << " = " << v << "\n"; };
  auto kb = [&](const char* k, bool v) { out << k << " = " << (v ? "true" : "false") << "\n"; };
  const ModelConfig& m = c.model;
  kv("dim", m.dim);
  kv("dim2d", m.dim2d);
  kv("heads", m.heads);
  kv("k1", m.k1);
  kv("k2", m.k2);
  kv("mlp_hidden", m.mlp_hidden);
  kv("dropout", m.dropout);
  kv("noise_sigma", m.noise_sigma);
  kv("text_layers", m.text_layers);
  kv("max_tokens", m.max_tokens);
  kv("geometry_scale", m.geometry_scale);
  kb("gat_self_loop", m.gat_self_loop);
  kb("lref_over_all_objects", m.lref_over_all_objects);
  kb("mask_lbr_diagonal", m.mask_lbr_diagonal);
  kb("relation_token_mask", m.relation_token_mask);
  kb("teacher_forcing", m.teacher_forcing);
  const TrainConfig& t = c.train;
  kv("lambda1", t.lambda1);
  kv("lambda2", t.lambda2);
  kv("lambda3", t.lambda3);
  kv("batch_size", t.batch_size);
  kv("epochs", t.epochs);
  kv("lr0", t.lr0);
  kv("decay", t.decay);
  kv("decay_every", t.decay_every);
  kv("decay_start", t.decay_start);
  kv("decay_end", t.decay_end);
  kv("grad_clip", t.grad_clip);
  kv("seed", t.seed);
  kv("ablation", ablation_name(t.ablation));
  kv("hard_threshold", t.hard_threshold);
  kv("max_train_records", t.max_train_records);
  kv("log_every", t.log_every);
  const GenConfig& g = c.gen;
  kv("n_objects", g.n_objects);
  kv("n_categories", g.n_categories);
  kv("rn_min", g.rn_min);
  kv("rn_max", g.rn_max);
  kv("min_distractors", g.min_distractors);
  kv("extra_distractors", g.extra_distractors);
  kv("gen_seed", g.seed);
  kv("margin", g.margin);
  kv("stack_probability", g.stack_probability);
  out << "scene_extent = " << g.scene_extent[0] << " " << g.scene_extent[1] << " " << g.scene_extent[2] << "\n";
  return out.str();
}

/// Parses `key = value` lines; '#' starts a comment.
inline ConfigBundle parse_config(std::string_view text, ConfigBundle base = {}) {
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    auto eq = line.find('=');
    auto strip = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    if (strip(line).empty()) continue;
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    apply_setting(base, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
  }
  base.model.validate();
  base.train.validate();
  base.gen.validate();
  return base;
}

inline ConfigBundle load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

}  // namespace b2n
