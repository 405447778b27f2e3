#pragma once

// OpenAI-compatible chat-completion adapter.
//
// Wire schema (POST {LLM_API_BASE}/chat/completions):
//   request  {"model", "messages": [{"role","content"}...], "temperature", "max_tokens", "n"}
//   response {"choices": [{"message": {"content": "..."}}...]}
// The system prompt is sent as the first message with role "system".
// Endpoints that ignore `n` are topped up with further calls until the
// requested number of samples has been collected.

#include "dialplan/gateway.hpp"

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

namespace dialplan {

struct RemoteBackendConfig {
  std::string base_url;  // e.g. https://api.openai.com/v1
  std::string api_key;
  std::string model = "gpt-3.5-turbo";
  std::chrono::seconds timeout{60};
  // Request-rate ceiling: minimum spacing between request starts.
  std::chrono::milliseconds min_interval{100};

  static RemoteBackendConfig from_env(std::string model = "gpt-3.5-turbo") {
    RemoteBackendConfig cfg;
    const char* base = std::getenv("LLM_API_BASE");
    const char* key = std::getenv("LLM_API_KEY");
    if (!base || !*base) throw Error(ErrorCode::Gateway, "LLM_API_BASE is not set");
    cfg.base_url = base;
    cfg.api_key = key ? key : "";
    cfg.model = std::move(model);
    return cfg;
  }
};

class RemoteChatBackend final : public Backend {
 public:
  explicit RemoteChatBackend(RemoteBackendConfig cfg) : cfg_(std::move(cfg)) {
    auto url = cfg_.base_url;
    while (!url.empty() && url.back() == '/') url.pop_back();
    const auto scheme_end = url.find("://");
    const auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
    const auto path_start = url.find('/', host_start);
    origin_ = path_start == std::string::npos ? url : url.substr(0, path_start);
    path_prefix_ = path_start == std::string::npos ? "" : url.substr(path_start);
  }

  std::string id() const override { return "remote:" + cfg_.model; }

  std::vector<std::string> generate(const CompletionRequest& request) override {
    std::vector<std::string> samples;
    while (static_cast<int>(samples.size()) < request.sample_count) {
      const int want = request.sample_count - static_cast<int>(samples.size());
      auto batch = post_once(request, want);
      if (batch.empty()) throw Error(ErrorCode::Protocol, "remote backend returned no choices");
      for (auto& s : batch) {
        if (static_cast<int>(samples.size()) < request.sample_count) samples.push_back(std::move(s));
      }
    }
    return samples;
  }

  static nlohmann::json request_body(const CompletionRequest& request, const std::string& model, int n) {
    nlohmann::json messages = nlohmann::json::array();
    if (!request.system_prompt.empty()) {
      messages.push_back({{"role", "system"}, {"content", request.system_prompt}});
    }
    for (const auto& m : request.messages) messages.push_back({{"role", m.role}, {"content", m.content}});
    return {{"model", model},
            {"messages", messages},
            {"temperature", request.temperature},
            {"max_tokens", request.max_tokens},
            {"n", n}};
  }

  static std::vector<std::string> parse_response(const std::string& body) {
    nlohmann::json doc;
    try {
      doc = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Protocol, std::string("malformed backend reply: ") + e.what());
    }
    if (!doc.contains("choices") || !doc["choices"].is_array()) {
      throw Error(ErrorCode::Protocol, "backend reply has no choices array");
    }
    std::vector<std::string> out;
    for (const auto& choice : doc["choices"]) {
      if (!choice.contains("message") || !choice["message"].contains("content") ||
          !choice["message"]["content"].is_string()) {
        throw Error(ErrorCode::Protocol, "backend choice without message content");
      }
      out.push_back(choice["message"]["content"].get<std::string>());
    }
    return out;
  }

 private:
  void throttle() {
    std::unique_lock lock(rate_mutex_);
    const auto now = std::chrono::steady_clock::now();
    if (next_slot_ > now) {
      const auto wait = next_slot_ - now;
      next_slot_ += cfg_.min_interval;
      lock.unlock();
      std::this_thread::sleep_for(wait);
    } else {
      next_slot_ = now + cfg_.min_interval;
    }
  }

  std::vector<std::string> post_once(const CompletionRequest& request, int n) {
    throttle();
    httplib::Client client(origin_);
    client.set_connection_timeout(cfg_.timeout);
    client.set_read_timeout(cfg_.timeout);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    const auto body = request_body(request, cfg_.model, n).dump();
    auto res = client.Post(path_prefix_ + "/chat/completions", headers, body, "application/json");
    if (!res) throw TransportError("transport failure: " + httplib::to_string(res.error()));
    if (res->status == 429 || res->status >= 500) {
      throw TransportError("HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw Error(ErrorCode::Protocol, "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512));
    }
    return parse_response(res->body);
  }

  RemoteBackendConfig cfg_;
  std::string origin_;
  std::string path_prefix_;
  std::mutex rate_mutex_;
  std::chrono::steady_clock::time_point next_slot_{};
};

}  // namespace dialplan
