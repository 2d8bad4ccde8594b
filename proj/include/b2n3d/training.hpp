#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "b2n3d/config.hpp"
#include "b2n3d/model.hpp"
#include "b2n3d/rng.hpp"

namespace b2n {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// lr0 * decay^d, d = number of decay epochs {start, start + every, ..., <= end} reached.
inline double lr_at(int epoch, const TrainConfig& cfg) {
  if (epoch < 0) throw InputError("lr_at: negative epoch");
  int d = 0;
  for (int e = cfg.decay_start; e <= cfg.decay_end; e += cfg.decay_every) {
    if (e <= epoch) ++d;
  }
  return cfg.lr0 * std::pow(cfg.decay, d);
}

/// Worker threads for batch and evaluation parallelism, from B2N_NUM_WORKERS (default 1).
inline int num_workers() {
  const char* v = std::getenv("B2N_NUM_WORKERS");
  if (!v || !*v) return 1;
  const int n = std::atoi(v);
  return n < 1 ? 1 : n;
}

/// Runs fn(i) for i in [0, count) on up to `workers` threads with a static partition.
template <typename Fn>
void parallel_for(int count, int workers, Fn&& fn) {
  workers = std::max(1, std::min(workers, count));
  if (workers == 1) {
    for (int i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (int i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Model {
  ConfigBundle config;
  Vocabulary categories;
  TokenVocabulary tokens;
  ad::ParameterStore<float> params;
  Architecture arch;

  static Model create(const ConfigBundle& cfg, Vocabulary categories, TokenVocabulary tokens) {
    cfg.model.validate();
    Model m;
    m.config = cfg;
    m.categories = std::move(categories);
    m.tokens = std::move(tokens);
    nn::Initializer<float> init(m.params, stream_seed(cfg.train.seed, 0, 0x1a17));
    m.arch = Architecture::create(init, cfg.model, m.categories.size(), m.tokens.size());
    return m;
  }

  PreparedRecord prepare(const Record& r) const { return prepare_record(r, categories, tokens, config.model); }
};

struct AdamState {
  std::vector<ad::Matrix<float>> m;
  std::vector<ad::Matrix<float>> v;
  std::int64_t step = 0;

  static AdamState zeros(const ad::ParameterStore<float>& p) { return {p.zero_gradients(), p.zero_gradients(), 0}; }
};

inline void adam_update(ad::ParameterStore<float>& params, AdamState& st, const std::vector<ad::Matrix<float>>& grads,
                        double lr, const TrainConfig& cfg) {
  ++st.step;
  const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
  const auto c1 = static_cast<float>(1.0 - std::pow(b1, static_cast<double>(st.step)));
  const auto c2 = static_cast<float>(1.0 - std::pow(b2, static_cast<double>(st.step)));
  const auto step = static_cast<float>(lr);
  const auto eps = static_cast<float>(cfg.adam_eps);
  for (int i = 0; i < params.size(); ++i) {
    auto& m = st.m[static_cast<std::size_t>(i)];
    auto& v = st.v[static_cast<std::size_t>(i)];
    const auto& g = grads[static_cast<std::size_t>(i)];
    m = static_cast<float>(b1) * m + static_cast<float>(1.0 - b1) * g;
    v = static_cast<float>(b2) * v + static_cast<float>(1.0 - b2) * g.cwiseProduct(g);
    params[i].value.array() -= step * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

/// Everything needed to resume or reproduce a run.
struct TrainState {
  Model model;
  AdamState adam;
  std::mt19937_64 shuffle_rng;
  int epochs_completed = 0;
};

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  LossComponents parts;
  double train_acc = 0.0;
  double val_acc = -1.0;  // -1 without a validation set
  int forced = 0;         // teacher-forced samples
  double seconds = 0.0;
};

struct TrainResult {
  TrainState state;
  std::vector<EpochStats> curve;
};

inline constexpr std::uint64_t kNoiseSalt = 0x6e6f697365;
inline constexpr std::uint64_t kDropoutSalt = 0x64726f70;
inline constexpr std::uint64_t kEvalSalt = 0x6576616c;

inline std::uint64_t eval_noise_seed(std::uint64_t seed, int index) {
  return stream_seed(seed, static_cast<std::uint64_t>(index), kEvalSalt);
}

inline std::vector<std::string> utterance_texts(const std::vector<Record>& records) {
  std::vector<std::string> texts;
  texts.reserve(records.size());
  for (const auto& r : records) texts.push_back(r.utterance.text);
  return texts;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRecord {
  int index = 0;
  int predicted = -1;
  int target = 0;
  int rn = 0;
  int distractors = 0;
  bool target_in_graph = false;
};

struct EvalReport {
  std::string ablation;
  int hard_threshold = 2;
  double overall_acc = 0.0;
  double hard_acc = 0.0;
  double easy_acc = 0.0;
  double rn_ge2_acc = 0.0;
  double rn_le1_acc = 0.0;
  int total = 0;
  int hard_count = 0;
  int easy_count = 0;
  int rn_ge2_count = 0;
  int rn_le1_count = 0;
  std::vector<EvalRecord> records;
};

/// Split accuracies from per-scene records; an empty split reports 0.
inline EvalReport summarize(std::vector<EvalRecord> records, int hard_threshold, std::string ablation) {
  EvalReport r;
  r.ablation = std::move(ablation);
  r.hard_threshold = hard_threshold;
  int ok = 0, hard_ok = 0, easy_ok = 0, ge2_ok = 0, le1_ok = 0;
  for (const auto& e : records) {
    const int hit = e.predicted == e.target ? 1 : 0;
    ok += hit;
    if (e.distractors >= hard_threshold) {
      ++r.hard_count;
      hard_ok += hit;
    } else {
      ++r.easy_count;
      easy_ok += hit;
    }
    if (e.rn >= 2) {
      ++r.rn_ge2_count;
      ge2_ok += hit;
    } else {
      ++r.rn_le1_count;
      le1_ok += hit;
    }
  }
  r.total = static_cast<int>(records.size());
  auto frac = [](int a, int b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); };
  r.overall_acc = frac(ok, r.total);
  r.hard_acc = frac(hard_ok, r.hard_count);
  r.easy_acc = frac(easy_ok, r.easy_count);
  r.rn_ge2_acc = frac(ge2_ok, r.rn_ge2_count);
  r.rn_le1_acc = frac(le1_ok, r.rn_le1_count);
  r.records = std::move(records);
  return r;
}

inline EvalRecord predict_record(const Model& model, const PreparedRecord& p, int index) {
  ad::Tape<float> tape(&model.params);
  ForwardOptions opts;
  opts.with_loss = false;
  opts.noise_seed = eval_noise_seed(model.config.train.seed, index);
  const auto res = forward(tape, model.arch, model.config.model, model.config.train, p, opts);
  return {index, res.predicted, p.target, p.rn, p.distractors, res.target_in_graph};
}

inline EvalReport evaluate_prepared(const Model& model, const std::vector<PreparedRecord>& data) {
  std::vector<EvalRecord> out(data.size());
  parallel_for(static_cast<int>(data.size()), num_workers(), [&](int i) {
    out[static_cast<std::size_t>(i)] = predict_record(model, data[static_cast<std::size_t>(i)], i);
  });
  return summarize(std::move(out), model.config.train.hard_threshold,
                   std::string(ablation_name(model.config.train.ablation)));
}

inline EvalReport evaluate(const Model& model, const std::vector<Record>& records) {
  std::vector<PreparedRecord> data;
  data.reserve(records.size());
  for (const auto& r : records) data.push_back(model.prepare(r));
  return evaluate_prepared(model, data);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& e : r.records) {
    recs.push_back({{"index", e.index},
                    {"predicted", e.predicted},
                    {"target", e.target},
                    {"rn", e.rn},
                    {"distractors", e.distractors},
                    {"target_in_graph", e.target_in_graph}});
  }
  return {{"ablation", r.ablation},         {"hard_threshold", r.hard_threshold}, {"overall_acc", r.overall_acc},
          {"hard_acc", r.hard_acc},         {"easy_acc", r.easy_acc},             {"rn_ge2_acc", r.rn_ge2_acc},
          {"rn_le1_acc", r.rn_le1_acc},     {"total", r.total},                   {"hard_count", r.hard_count},
          {"easy_count", r.easy_count},     {"rn_ge2_count", r.rn_ge2_count},     {"rn_le1_count", r.rn_le1_count},
          {"records", std::move(recs)}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  try {
    std::vector<EvalRecord> recs;
    for (const auto& e : j.at("records")) {
      recs.push_back({e.at("index").get<int>(), e.at("predicted").get<int>(), e.at("target").get<int>(),
                      e.at("rn").get<int>(), e.at("distractors").get<int>(), e.at("target_in_graph").get<bool>()});
    }
    EvalReport r = summarize(std::move(recs), j.at("hard_threshold").get<int>(), j.at("ablation").get<std::string>());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed report: ") + e.what());
  }
}

inline void write_report(const std::string& path, const EvalReport& r) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write report: " + path);
  f << to_json(r).dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

inline EvalReport read_report(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open report: " + path);
  try {
    return report_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::parse_error& e) {
    throw InputError("report " + path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'B', '2', 'N', '3', 'D', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

class BinaryWriter {
 public:
  explicit BinaryWriter(std::ostream& out) : out_(out) {}
  template <typename T>
  void pod(const T& v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void strings(const std::vector<std::string>& v) {
    pod(static_cast<std::uint64_t>(v.size()));
    for (const auto& s : v) str(s);
  }
  void matrix(const ad::Matrix<float>& m) {
    pod(static_cast<std::int64_t>(m.rows()));
    pod(static_cast<std::int64_t>(m.cols()));
    out_.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
  }

 private:
  std::ostream& out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::istream& in) : in_(in) {}
  template <typename T>
  T pod() {
    T v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw CheckpointError("truncated checkpoint");
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 30)) throw CheckpointError("corrupt checkpoint string length");
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw CheckpointError("truncated checkpoint");
    return s;
  }
  std::vector<std::string> strings() {
    const auto n = pod<std::uint64_t>();
    if (n > (1ull << 24)) throw CheckpointError("corrupt checkpoint list length");
    std::vector<std::string> v;
    for (std::uint64_t i = 0; i < n; ++i) v.push_back(str());
    return v;
  }
  ad::Matrix<float> matrix() {
    const auto r = pod<std::int64_t>();
    const auto c = pod<std::int64_t>();
    if (r < 0 || c < 0 || r * c > (1ll << 30)) throw CheckpointError("corrupt checkpoint matrix shape");
    ad::Matrix<float> m(r, c);
    in_.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(float)));
    if (!in_) throw CheckpointError("truncated checkpoint");
    return m;
  }

 private:
  std::istream& in_;
};

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const TrainState& st) {
  detail::BinaryWriter w(out);
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  w.pod(kCheckpointVersion);
  w.str(format_config(st.model.config));
  w.strings(st.model.categories.names());
  w.strings(st.model.tokens.tokens());
  std::ostringstream rng;
  rng << st.shuffle_rng;
  w.str(rng.str());
  w.pod(static_cast<std::int32_t>(st.epochs_completed));
  w.pod(static_cast<std::int64_t>(st.adam.step));
  const auto& params = st.model.params;
  w.pod(static_cast<std::uint64_t>(params.size()));
  for (int i = 0; i < params.size(); ++i) {
    w.str(params[i].name);
    w.matrix(params[i].value);
    w.matrix(st.adam.m[static_cast<std::size_t>(i)]);
    w.matrix(st.adam.v[static_cast<std::size_t>(i)]);
  }
}

inline void save_checkpoint(const std::string& path, const TrainState& st) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint: " + path);
  save_checkpoint(f, st);
  if (!f) throw CheckpointError("write failed: " + path);
}

inline TrainState load_checkpoint(std::istream& in) {
  char magic[sizeof(kCheckpointMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) throw CheckpointError("not a checkpoint file");
  detail::BinaryReader r(in);
  const auto version = r.pod<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const ConfigBundle cfg = parse_config(r.str());
  Vocabulary categories(r.strings());
  TokenVocabulary tokens(r.strings());
  TrainState st{Model::create(cfg, std::move(categories), std::move(tokens)), {}, {}, 0};
  std::istringstream rng(r.str());
  rng >> st.shuffle_rng;
  if (!rng) throw CheckpointError("corrupt rng state");
  st.epochs_completed = r.pod<std::int32_t>();
  st.adam = AdamState::zeros(st.model.params);
  st.adam.step = r.pod<std::int64_t>();
  auto& params = st.model.params;
  if (r.pod<std::uint64_t>() != static_cast<std::uint64_t>(params.size())) {
    throw CheckpointError("parameter count does not match the configured architecture");
  }
  for (int i = 0; i < params.size(); ++i) {
    const std::string name = r.str();
    if (name != params[i].name) throw CheckpointError("unexpected parameter '" + name + "'");
    for (auto* dst : {&params[i].value, &st.adam.m[static_cast<std::size_t>(i)], &st.adam.v[static_cast<std::size_t>(i)]}) {
      auto m = r.matrix();
      if (m.rows() != dst->rows() || m.cols() != dst->cols()) throw CheckpointError("shape mismatch for " + name);
      *dst = std::move(m);
    }
  }
  return st;
}

inline TrainState load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint: " + path);
  return load_checkpoint(f);
}

// ---------------------------------------------------------------------------
// Training

struct TrainHooks {
  std::function<void(const EpochStats&)> on_epoch;
  std::function<void(int epoch, int batch, double loss)> on_batch;
};

inline TrainState init_training(const ConfigBundle& cfg, const std::vector<Record>& train_set) {
  cfg.train.validate();
  TrainState st{Model::create(cfg, cfg.gen.vocabulary(), TokenVocabulary::build(utterance_texts(train_set))), {}, {}, 0};
  st.adam = AdamState::zeros(st.model.params);
  st.shuffle_rng.seed(stream_seed(cfg.train.seed, 0, 0x5f5f));
  return st;
}

inline bool all_finite(const std::vector<ad::Matrix<float>>& grads) {
  for (const auto& g : grads) {
    if (!g.allFinite()) return false;
  }
  return true;
}

/// Continues `st` for the remaining configured epochs. Per-sample randomness comes from
/// streams keyed by (seed, epoch, record), and per-sample gradients are reduced in batch
/// order, so the result does not depend on the worker count.
inline std::vector<EpochStats> continue_training(TrainState& st, const std::vector<PreparedRecord>& train_set,
                                                 const std::vector<PreparedRecord>& val_set,
                                                 const TrainHooks& hooks = {}) {
  Model& model = st.model;
  const TrainConfig& tc = model.config.train;
  const int n = tc.max_train_records > 0 ? std::min<int>(tc.max_train_records, static_cast<int>(train_set.size()))
                                         : static_cast<int>(train_set.size());
  if (n == 0) throw TrainingError("empty training set");
  const int workers = num_workers();
  std::vector<EpochStats> curve;
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int epoch = st.epochs_completed; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), st.shuffle_rng);
    const double lr = lr_at(epoch, tc);
    const std::uint64_t noise_base = stream_seed(tc.seed, static_cast<std::uint64_t>(epoch), kNoiseSalt);
    const std::uint64_t drop_base = stream_seed(tc.seed, static_cast<std::uint64_t>(epoch), kDropoutSalt);
    EpochStats es;
    es.epoch = epoch;
    es.lr = lr;
    int correct = 0;
    for (int start = 0, batch = 0; start < n; start += tc.batch_size, ++batch) {
      const int count = std::min(tc.batch_size, n - start);
      std::vector<ForwardResult<float>> results(static_cast<std::size_t>(count));
      std::vector<double> losses(static_cast<std::size_t>(count));
      auto grads = model.params.zero_gradients();
      auto run = [&](int k, std::vector<ad::Matrix<float>>& sink) {
        const int idx = order[static_cast<std::size_t>(start + k)];
        std::mt19937_64 drop_rng(stream_seed(drop_base, static_cast<std::uint64_t>(idx)));
        ForwardOptions opts;
        opts.training = true;
        opts.noise_seed = stream_seed(noise_base, static_cast<std::uint64_t>(idx));
        opts.dropout_rng = &drop_rng;
        ad::Tape<float> tape(&model.params);
        auto res = forward(tape, model.arch, model.config.model, tc, train_set[static_cast<std::size_t>(idx)], opts);
        losses[static_cast<std::size_t>(k)] = res.loss.scalar();
        tape.backward(res.loss, &sink);
        results[static_cast<std::size_t>(k)] = res;
      };
      // Each sample gets its own buffer even on one worker so the float summation order is fixed.
      std::vector<std::vector<ad::Matrix<float>>> per(static_cast<std::size_t>(count));
      parallel_for(count, workers, [&](int k) {
        per[static_cast<std::size_t>(k)] = model.params.zero_gradients();
        run(k, per[static_cast<std::size_t>(k)]);
      });
      for (int k = 0; k < count; ++k) {
        for (std::size_t p = 0; p < grads.size(); ++p) grads[p] += per[static_cast<std::size_t>(k)][p];
      }
      double batch_loss = 0.0;
      for (int k = 0; k < count; ++k) {
        const auto& res = results[static_cast<std::size_t>(k)];
        const int idx = order[static_cast<std::size_t>(start + k)];
        if (!std::isfinite(losses[static_cast<std::size_t>(k)])) {
          std::ostringstream msg;
          msg << "loss diverged at epoch " << epoch << ", batch " << batch << ", record " << idx << " (ref "
              << res.parts.ref << ", text " << res.parts.text << ", object " << res.parts.object << ", binary "
              << res.parts.binary << ", nary " << res.parts.nary << ")";
          throw TrainingError(msg.str());
        }
        batch_loss += losses[static_cast<std::size_t>(k)];
        es.parts.ref += res.parts.ref;
        es.parts.text += res.parts.text;
        es.parts.object += res.parts.object;
        es.parts.binary += res.parts.binary;
        es.parts.nary += res.parts.nary;
        es.forced += res.forced ? 1 : 0;
        correct += res.predicted == train_set[static_cast<std::size_t>(idx)].target ? 1 : 0;
      }
      es.loss += batch_loss;
      const float inv = 1.0f / static_cast<float>(count);
      for (auto& g : grads) g *= inv;
      if (!all_finite(grads)) {
        throw TrainingError("non-finite gradient at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch));
      }
      if (tc.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& g : grads) sq += static_cast<double>(g.squaredNorm());
        const double norm = std::sqrt(sq);
        if (norm > tc.grad_clip) {
          const auto s = static_cast<float>(tc.grad_clip / norm);
          for (auto& g : grads) g *= s;
        }
      }
      adam_update(model.params, st.adam, grads, lr, tc);
      if (hooks.on_batch && tc.log_every > 0 && (batch + 1) % tc.log_every == 0) {
        hooks.on_batch(epoch, batch, batch_loss / count);
      }
    }
    const double dn = static_cast<double>(n);
    es.loss /= dn;
    es.parts.ref /= dn;
    es.parts.text /= dn;
    es.parts.object /= dn;
    es.parts.binary /= dn;
    es.parts.nary /= dn;
    es.train_acc = static_cast<double>(correct) / dn;
    if (!val_set.empty()) es.val_acc = evaluate_prepared(model, val_set).overall_acc;
    st.epochs_completed = epoch + 1;
    es.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    curve.push_back(es);
    if (hooks.on_epoch) hooks.on_epoch(es);
  }
  return curve;
}

inline TrainResult train(const std::vector<Record>& train_set, const std::vector<Record>& val_set,
                         const ConfigBundle& cfg, const TrainHooks& hooks = {}) {
  TrainResult out{init_training(cfg, train_set), {}};
  std::vector<PreparedRecord> tr, va;
  tr.reserve(train_set.size());
  va.reserve(val_set.size());
  for (const auto& r : train_set) tr.push_back(out.state.model.prepare(r));
  for (const auto& r : val_set) va.push_back(out.state.model.prepare(r));
  out.curve = continue_training(out.state, tr, va, hooks);
  return out;
}

inline nlohmann::json to_json(const std::vector<EpochStats>& curve) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : curve) {
    arr.push_back({{"epoch", e.epoch},
                   {"lr", e.lr},
                   {"loss", e.loss},
                   {"l_ref", e.parts.ref},
                   {"l_t", e.parts.text},
                   {"l_v", e.parts.object},
                   {"l_br", e.parts.binary},
                   {"l_nr", e.parts.nary},
                   {"train_acc", e.train_acc},
                   {"val_acc", e.val_acc},
                   {"forced", e.forced},
                   {"seconds", e.seconds}});
  }
  return arr;
}

}  // namespace b2n
