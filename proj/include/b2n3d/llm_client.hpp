#pragma once

#include <cstdlib>
#include <memory>
#include <string>

// Eigen first: httplib pulls in <resolv.h>, whose _res macro breaks Eigen's product kernels.
#include <Eigen/Dense>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "b2n3d/relation_extraction.hpp"

namespace b2n {

/// Chat-completion endpoint. Implementations must tolerate concurrent calls.
class CompletionClient {
 public:
  virtual ~CompletionClient() = default;
  virtual std::string complete(const std::string& prompt) const = 0;
};

struct LlmEndpoint {
  std::string base_url;  // e.g. https://api.example.com/v1
  std::string api_key;
  std::string model = "gpt-4o-mini";

  static LlmEndpoint from_environment() {
    auto get = [](const char* name) -> std::string {
      const char* v = std::getenv(name);
      return v ? std::string(v) : std::string();
    };
    LlmEndpoint e;
    e.base_url = get("B2N_LLM_BASE_URL");
    e.api_key = get("B2N_LLM_API_KEY");
    if (auto m = get("B2N_LLM_MODEL"); !m.empty()) e.model = m;
    if (e.base_url.empty()) throw ExtractionError("B2N_LLM_BASE_URL is not set");
    return e;
  }
};

inline nlohmann::json chat_request_body(const std::string& model, const std::string& prompt) {
  return {{"model", model},
          {"temperature", 0},
          {"messages",
           {{{"role", "system"}, {"content", "Answer only with entity pairs formatted as (a-b, c-d)."}},
            {{"role", "user"}, {"content", prompt}}}}};
}

inline std::string chat_reply_content(const std::string& body) {
  try {
    const auto j = nlohmann::json::parse(body);
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ExtractionError(std::string("malformed completion response: ") + e.what());
  }
}

/// OpenAI-style `POST {base}/chat/completions`. A fresh connection per call keeps the
/// client stateless and safe to share between worker threads.
class HttpCompletionClient : public CompletionClient {
 public:
  explicit HttpCompletionClient(LlmEndpoint endpoint) : endpoint_(std::move(endpoint)) {
    const auto scheme_end = endpoint_.base_url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = endpoint_.base_url.find('/', host_start);
    origin_ = endpoint_.base_url.substr(0, path_start);
    prefix_ = path_start == std::string::npos ? "" : endpoint_.base_url.substr(path_start);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::string complete(const std::string& prompt) const override {
    httplib::Client cli(origin_);
    cli.set_connection_timeout(10);
    cli.set_read_timeout(60);
    httplib::Headers headers;
    if (!endpoint_.api_key.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.api_key);
    auto res = cli.Post(prefix_ + "/chat/completions", headers, chat_request_body(endpoint_.model, prompt).dump(),
                        "application/json");
    if (!res) throw ExtractionError("transport failure: " + httplib::to_string(res.error()));
    if (res->status != 200) throw ExtractionError("completion endpoint returned HTTP " + std::to_string(res->status));
    return chat_reply_content(res->body);
  }

 private:
  LlmEndpoint endpoint_;
  std::string origin_;
  std::string prefix_;
};

/// Sends the relation prompt for `text` and canonicalizes the "(a-b, c-d)" reply.
inline ExtractionResult llm_extract_relations(const std::string& text, const CompletionClient& client,
                                              const Vocabulary& vocab,
                                              double threshold = kDefaultCanonicalThreshold) {
  const std::string reply = client.complete(relation_prompt(text));
  return parse_llm_reply(reply, vocab, threshold);
}

}  // namespace b2n
