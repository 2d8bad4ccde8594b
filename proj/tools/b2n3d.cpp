// b2n3d command-line tool: dataset generation, relation extraction, training,
// evaluation and plotting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "b2n3d/config.hpp"
#include "b2n3d/dataset_io.hpp"
#include "b2n3d/llm_client.hpp"
#include "b2n3d/plot.hpp"
#include "b2n3d/relation_extraction.hpp"
#include "b2n3d/synthetic.hpp"
#include "b2n3d/training.hpp"

namespace fs = std::filesystem;
using namespace b2n;

namespace {

/// A directory holding train.jsonl / val.jsonl, or a single dataset file.
fs::path dataset_file(const std::string& data, const std::string& split) {
  fs::path p(data);
  if (fs::is_directory(p)) return p / (split + ".jsonl");
  return p;
}

ConfigBundle load_bundle(const std::string& path, const std::vector<std::string>& overrides) {
  ConfigBundle cfg = path.empty() ? ConfigBundle{} : load_config(path);
  std::string text;
  for (const auto& o : overrides) text += o + "\n";
  return parse_config(text, cfg);
}

nlohmann::json stats_json(const DatasetStats& s) {
  nlohmann::json rn = nlohmann::json::object(), preds = nlohmann::json::object();
  for (const auto& [k, v] : s.rn_histogram) rn[std::to_string(k)] = v;
  for (const auto& [k, v] : s.predicate_histogram) preds[k] = v;
  return {{"count", s.count}, {"rn_histogram", rn}, {"predicates", preds}, {"scene_regenerations", s.scene_regenerations}};
}

/// A path ending in .jsonl receives all `count` records; anything else is a directory
/// that receives train.jsonl (count records) and val.jsonl (n_val records).
int cmd_generate(const std::string& config, const std::vector<std::string>& sets, const std::string& out, int count,
                 int n_val) {
  const ConfigBundle cfg = load_bundle(config, sets);
  DatasetStats stats;
  const fs::path path(out);
  if (path.extension() == ".jsonl") {
    if (n_val > 0) throw InputError("--val needs a directory output");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    write_dataset(path.string(), generate_records(cfg.gen, count, &stats));
  } else {
    fs::create_directories(path);
    auto records = generate_records(cfg.gen, count + n_val, &stats);
    const std::vector<Record> train(records.begin(), records.begin() + count);
    const std::vector<Record> val(records.begin() + count, records.end());
    write_dataset((path / "train.jsonl").string(), train);
    write_dataset((path / "val.jsonl").string(), val);
  }
  std::cout << stats_json(stats).dump(2) << "\n";
  return 0;
}

nlohmann::json extraction_json(const ExtractionResult& res) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : res.pairs) pairs.push_back({p.first, p.second});
  return {{"pairs", pairs},
          {"unresolved", res.unresolved},
          {"source", res.source == ExtractionSource::kLlm ? "llm" : "parser"},
          {"diagnostics", res.diagnostics}};
}

/// One JSON line per record of `in`, or a single object for --text.
int cmd_extract(const std::string& config, const std::vector<std::string>& sets, const std::string& in,
                const std::string& text, const std::string& source, const std::string& out, double threshold) {
  if (in.empty() == text.empty()) throw InputError("give exactly one of --in and --text");
  const ConfigBundle cfg = load_bundle(config, sets);
  const Vocabulary vocab = cfg.gen.vocabulary();
  TemplateGrammar grammar(vocab);
  grammar.threshold = threshold;
  std::unique_ptr<HttpCompletionClient> client;
  if (source == "llm") client = std::make_unique<HttpCompletionClient>(LlmEndpoint::from_environment());
  auto extract = [&](const std::string& t) {
    if (!client) return parse_relations(t, grammar);
    try {
      return llm_extract_relations(t, *client, vocab, threshold);
    } catch (const ExtractionError& e) {
      ExtractionResult r = parse_relations(t, grammar);
      r.diagnostics.push_back(std::string("llm failed, parser fallback: ") + e.what());
      return r;
    }
  };
  std::ofstream f;
  if (!out.empty()) {
    f.open(out);
    if (!f) throw InputError("cannot write labels file: " + out);
  }
  std::ostream& dst = out.empty() ? std::cout : f;
  if (!text.empty()) {
    dst << extraction_json(extract(text)).dump(out.empty() ? 2 : -1) << "\n";
    if (!dst) throw InputError("write failed: " + out);
    return 0;
  }
  const auto records = read_dataset(in);
  int agree = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const ExtractionResult res = extract(records[i].utterance.text);
    agree += res.pairs == records[i].utterance.label.pairs ? 1 : 0;
    nlohmann::json j = extraction_json(res);
    j["index"] = i;
    dst << j.dump() << "\n";
  }
  if (!dst) throw InputError("write failed: " + out);
  std::cerr << agree << "/" << records.size() << " records match the stored labels\n";
  return 0;
}

int cmd_train(const std::string& config, const std::vector<std::string>& sets, const std::string& data,
              const std::string& out, const std::string& curve_path) {
  const ConfigBundle cfg = load_bundle(config, sets);
  const auto train_set = read_dataset(dataset_file(data, "train").string());
  std::vector<Record> val_set;
  if (fs::is_directory(data) && fs::exists(fs::path(data) / "val.jsonl")) val_set = read_dataset(dataset_file(data, "val").string());
  std::cerr << "training " << ablation_name(cfg.train.ablation) << " on " << train_set.size() << " records ("
            << val_set.size() << " validation), " << num_workers() << " worker(s)\n";
  TrainHooks hooks;
  hooks.on_epoch = [](const EpochStats& e) {
    std::cerr << "epoch " << e.epoch << " lr " << e.lr << " loss " << e.loss << " train_acc " << e.train_acc;
    if (e.val_acc >= 0.0) std::cerr << " val_acc " << e.val_acc;
    std::cerr << " (" << e.seconds << "s)\n";
  };
  hooks.on_batch = [](int epoch, int batch, double loss) {
    std::cerr << "  epoch " << epoch << " batch " << batch << " loss " << loss << "\n";
  };
  const TrainResult res = train(train_set, val_set, cfg, hooks);
  save_checkpoint(out, res.state);
  if (!curve_path.empty()) {
    std::ofstream f(curve_path);
    f << to_json(res.curve).dump(2) << "\n";
    if (!f) throw std::runtime_error("cannot write curve file: " + curve_path);
  }
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data, const std::string& split, const std::string& report) {
  const TrainState st = load_checkpoint(ckpt);
  const auto records = read_dataset(dataset_file(data, split).string());
  const EvalReport r = evaluate(st.model, records);
  if (!report.empty()) write_report(report, r);
  std::cout << "overall " << r.overall_acc << " hard " << r.hard_acc << " easy " << r.easy_acc << " rn>=2 "
            << r.rn_ge2_acc << " rn<=1 " << r.rn_le1_acc << " (" << r.total << " records)\n";
  return 0;
}

int cmd_plot(const std::vector<std::string>& reports, const std::vector<std::string>& curves, const std::string& out) {
  std::vector<EvalReport> rs;
  for (const auto& p : reports) rs.push_back(read_report(p));
  std::vector<TrainingCurve> cs;
  for (const auto& p : curves) {
    std::ifstream f(p);
    if (!f) throw InputError("cannot open curve file: " + p);
    cs.push_back(curve_from_json(fs::path(p).stem().string(), nlohmann::json::parse(f)));
  }
  const PlotOutput o = plot_reports(rs, out, cs);
  for (const auto& f : o.files) std::cout << f.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Relational 3D object grounding on synthetic scenes"};
  app.require_subcommand(1);

  std::string config, data, out, ckpt, report, split = "val", text, curve, in, source = "parser", fig_dir = "figures";
  std::vector<std::string> sets, reports, curves;
  int count = 1000, n_val = 0;
  double threshold = kDefaultCanonicalThreshold;

  auto* gen = app.add_subcommand("generate-data", "Generate a synthetic dataset");
  gen->add_option("--config", config, "Key-value config file");
  gen->add_option("--set", sets, "Config override key=value (repeatable)");
  gen->add_option("--count", count, "Records (training records for a directory output)")->check(CLI::NonNegativeNumber);
  gen->add_option("--val", n_val, "Validation records for a directory output")->check(CLI::NonNegativeNumber);
  gen->add_option("--out", out, "Dataset file (*.jsonl) or directory")->required();

  auto* ext = app.add_subcommand("extract-relations", "Extract category pairs from descriptions");
  ext->add_option("--config", config, "Key-value config file (vocabulary size)");
  ext->add_option("--set", sets, "Config override key=value (repeatable)");
  ext->add_option("--in", in, "Dataset file");
  ext->add_option("--text", text, "A single description");
  ext->add_option("--source", source, "parser or llm")->check(CLI::IsMember({"parser", "llm"}));
  ext->add_option("--out", out, "Labels file (JSON lines); stdout when omitted");
  ext->add_option("--threshold", threshold, "Canonicalization distance threshold");

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "Key-value config file");
  tr->add_option("--set", sets, "Config override key=value (repeatable)");
  tr->add_option("--data", data, "Directory with train.jsonl and optional val.jsonl, or a file")->required();
  tr->add_option("--out", out, "Checkpoint path")->required();
  tr->add_option("--curve", curve, "Write per-epoch statistics as JSON");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "Checkpoint path")->required();
  ev->add_option("--data", data, "Dataset directory or file")->required();
  ev->add_option("--split", split, "Split file name inside the data directory");
  ev->add_option("--report", report, "Report JSON path");

  auto* pl = app.add_subcommand("plot", "Render figures from evaluation reports");
  pl->add_option("--reports", reports, "Report JSON files")->required();
  pl->add_option("--curves", curves, "Training curve JSON files");
  pl->add_option("--out", fig_dir, "Output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_generate(config, sets, out, count, n_val);
    if (ext->parsed()) return cmd_extract(config, sets, in, text, source, out, threshold);
    if (tr->parsed()) return cmd_train(config, sets, data, out, curve);
    if (ev->parsed()) return cmd_eval(ckpt, data, split, report);
    if (pl->parsed()) return cmd_plot(reports, curves, fig_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
