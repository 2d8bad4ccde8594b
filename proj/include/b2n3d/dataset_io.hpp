#pragma once

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "b2n3d/scene.hpp"

// Line-delimited JSON, one (scene, utterance) record per line.
namespace b2n {

inline nlohmann::json to_json(const Record& r) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : r.scene.objects) {
    objects.push_back({{"id", o.id},
                       {"category", o.category},
                       {"center", {o.box.center[0], o.box.center[1], o.box.center[2]}},
                       {"size", {o.box.size[0], o.box.size[1], o.box.size[2]}}});
  }
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.utterance.label.pairs) pairs.push_back({p.first, p.second});
  return {{"objects", std::move(objects)},
          {"target_id", r.scene.target_id},
          {"seed", r.scene.seed},
          {"text", r.utterance.text},
          {"pairs", std::move(pairs)},
          {"target_category", r.utterance.target_category},
          {"rn", r.utterance.rn}};
}

inline Record record_from_json(const nlohmann::json& j) {
  Record r;
  for (const auto& o : j.at("objects")) {
    ObjectProposal p;
    p.id = o.at("id").get<int>();
    p.category = o.at("category").get<std::string>();
    for (int k = 0; k < 3; ++k) {
      p.box.center[k] = o.at("center").at(k).get<double>();
      p.box.size[k] = o.at("size").at(k).get<double>();
    }
    r.scene.objects.push_back(std::move(p));
  }
  r.scene.target_id = j.at("target_id").get<int>();
  r.scene.seed = j.value("seed", std::uint64_t{0});
  r.utterance.text = j.at("text").get<std::string>();
  for (const auto& p : j.at("pairs")) {
    r.utterance.label.pairs.insert(CategoryPair(p.at(0).get<std::string>(), p.at(1).get<std::string>()));
  }
  r.utterance.target_category = j.at("target_category").get<std::string>();
  r.utterance.rn = j.at("rn").get<int>();
  return r;
}

inline std::string serialize_record(const Record& r) { return to_json(r).dump(); }

inline Record deserialize_record(const std::string& line) {
  try {
    return record_from_json(nlohmann::json::parse(line));
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed dataset record: ") + e.what());
  }
}

inline void write_dataset(const std::string& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const auto& r : records) out << serialize_record(r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::vector<Record> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);
  std::vector<Record> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    records.push_back(deserialize_record(line));
  }
  return records;
}

}  // namespace b2n
