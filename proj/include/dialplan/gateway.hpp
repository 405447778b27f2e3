#pragma once

#include "dialplan/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <thread>
#include <vector>

namespace dialplan {

struct ChatMessage {
  std::string role;  // "user" or "assistant"
  std::string content;

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

struct CompletionRequest {
  std::string system_prompt;
  std::vector<ChatMessage> messages;
  double temperature = 0.7;
  int max_tokens = 256;
  int sample_count = 1;

  void validate() const {
    if (sample_count < 1) throw Error(ErrorCode::InvalidRequest, "sample_count must be >= 1");
    if (max_tokens <= 0) throw Error(ErrorCode::InvalidRequest, "max_tokens must be > 0");
    if (temperature < 0.0) throw Error(ErrorCode::InvalidRequest, "temperature must be >= 0");
    for (std::size_t i = 0; i < messages.size(); ++i) {
      const auto& role = messages[i].role;
      if (role != "user" && role != "assistant") {
        throw Error(ErrorCode::InvalidRequest, "unknown message role '" + role + "'");
      }
      if (i > 0 && messages[i - 1].role == role) {
        throw Error(ErrorCode::InvalidRequest, "message roles must alternate (index " + std::to_string(i) + ")");
      }
    }
  }

  /// Stable fingerprint of the prompt content. Decoding parameters other than
  /// the sample count are excluded.
  std::uint64_t fingerprint() const {
    std::uint64_t h = fnv1a64(system_prompt);
    for (const auto& m : messages) {
      h = fnv1a64(m.role, h);
      h = fnv1a64("\x1f", h);
      h = fnv1a64(m.content, h);
      h = fnv1a64("\x1e", h);
    }
    return h;
  }
};

struct Completion {
  std::vector<std::string> samples;
  std::string backend_id;
  std::chrono::nanoseconds latency{0};
};

/// Retryable failure raised by backends (connection loss, 429, 5xx).
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A text-generation backend. `generate` must return exactly
/// `request.sample_count` samples or throw. Implementations must be safe to
/// call concurrently.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string id() const = 0;
  virtual std::vector<std::string> generate(const CompletionRequest& request) = 0;
};

using BackendPtr = std::shared_ptr<Backend>;

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};
  double multiplier = 2.0;
};

inline Completion complete(const CompletionRequest& request, Backend& backend, const RetryPolicy& retry = {}) {
  request.validate();
  const auto start = std::chrono::steady_clock::now();
  auto delay = retry.initial_backoff;
  std::string last_error;
  const int attempts = std::max(1, retry.max_attempts);
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    try {
      auto samples = backend.generate(request);
      if (static_cast<int>(samples.size()) != request.sample_count) {
        throw Error(ErrorCode::Protocol, "backend '" + backend.id() + "' returned " + std::to_string(samples.size()) +
                                             " samples, expected " + std::to_string(request.sample_count));
      }
      return Completion{std::move(samples), backend.id(), std::chrono::steady_clock::now() - start};
    } catch (const TransportError& e) {
      last_error = e.what();
      if (attempt < attempts && delay.count() > 0) {
        std::this_thread::sleep_for(delay);
        delay = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(delay.count()) * retry.multiplier));
      }
    }
  }
  throw GatewayError("backend '" + backend.id() + "': " + last_error, attempts);
}

// ---------------------------------------------------------------------------
// Deterministic backends

class FixedReplyBackend final : public Backend {
 public:
  explicit FixedReplyBackend(std::string reply) : reply_(std::move(reply)) {}
  std::string id() const override { return "fixed"; }
  std::vector<std::string> generate(const CompletionRequest& request) override {
    return std::vector<std::string>(static_cast<std::size_t>(request.sample_count), reply_);
  }

 private:
  std::string reply_;
};

/// Backend driven by a callable `(request, sample_index) -> text`.
class CallbackBackend final : public Backend {
 public:
  using Fn = std::function<std::string(const CompletionRequest&, int)>;
  CallbackBackend(std::string id, Fn fn) : id_(std::move(id)), fn_(std::move(fn)) {}
  std::string id() const override { return id_; }
  std::vector<std::string> generate(const CompletionRequest& request) override {
    std::vector<std::string> out;
    out.reserve(static_cast<std::size_t>(request.sample_count));
    for (int i = 0; i < request.sample_count; ++i) out.push_back(fn_(request, i));
    return out;
  }

 private:
  std::string id_;
  Fn fn_;
};

/// One rule of a scripted backend fixture.
///   when    - substring that must occur in the final message (or the system
///             prompt when there are no messages); empty matches anything
///   pattern - optional ECMAScript regex searched over the whole prompt text;
///             `$1`..`$9` in replies expand to the groups of its last match
///   replies - candidate replies; the pick is keyed on the prompt fingerprint
struct ScriptedRule {
  std::string when;
  std::string pattern;
  std::vector<std::string> replies;
};

class ScriptedBackend final : public Backend {
 public:
  ScriptedBackend(std::vector<ScriptedRule> rules, std::vector<std::string> fallback, std::string id = "scripted")
      : rules_(std::move(rules)), fallback_(std::move(fallback)), id_(std::move(id)) {
    for (const auto& r : rules_) {
      if (r.replies.empty()) throw Error(ErrorCode::InvalidRequest, "scripted rule without replies");
      compiled_.push_back(r.pattern.empty() ? std::nullopt : std::optional<std::regex>(std::regex(r.pattern)));
    }
    if (fallback_.empty()) fallback_.push_back("");
  }

  static ScriptedBackend from_json(const nlohmann::json& doc, std::string id = "scripted") {
    std::vector<ScriptedRule> rules;
    for (const auto& r : doc.value("rules", nlohmann::json::array())) {
      ScriptedRule rule;
      rule.when = r.value("when", "");
      rule.pattern = r.value("pattern", "");
      if (r.contains("reply")) rule.replies.push_back(r.at("reply").get<std::string>());
      for (const auto& s : r.value("replies", nlohmann::json::array())) rule.replies.push_back(s.get<std::string>());
      rules.push_back(std::move(rule));
    }
    std::vector<std::string> fallback;
    if (doc.contains("default")) {
      const auto& d = doc.at("default");
      if (d.is_string()) {
        fallback.push_back(d.get<std::string>());
      } else {
        for (const auto& s : d) fallback.push_back(s.get<std::string>());
      }
    }
    return ScriptedBackend(std::move(rules), std::move(fallback), std::move(id));
  }

  static ScriptedBackend from_file(const std::filesystem::path& path, std::string id = "scripted") {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open scripted fixture " + path.string());
    try {
      return from_json(nlohmann::json::parse(in), std::move(id));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Io, "bad scripted fixture " + path.string() + ": " + e.what());
    }
  }

  std::string id() const override { return id_; }

  std::vector<std::string> generate(const CompletionRequest& request) override {
    const std::string& probe = request.messages.empty() ? request.system_prompt : request.messages.back().content;
    std::string full = request.system_prompt;
    for (const auto& m : request.messages) {
      full += '\n';
      full += m.content;
    }
    const auto key = request.fingerprint();
    for (std::size_t r = 0; r < rules_.size(); ++r) {
      const auto& rule = rules_[r];
      if (!rule.when.empty() && probe.find(rule.when) == std::string::npos) continue;
      std::smatch last;
      if (compiled_[r]) {
        bool found = false;
        for (auto it = std::sregex_iterator(full.begin(), full.end(), *compiled_[r]); it != std::sregex_iterator(); ++it) {
          last = *it;
          found = true;
        }
        if (!found) continue;
      }
      return pick(rule.replies, key, request.sample_count, compiled_[r] ? &last : nullptr);
    }
    return pick(fallback_, key, request.sample_count, nullptr);
  }

 private:
  static std::vector<std::string> pick(const std::vector<std::string>& replies, std::uint64_t key, int count,
                                       const std::smatch* match) {
    std::vector<std::string> out;
    for (int i = 0; i < count; ++i) {
      std::string reply = replies[(key + static_cast<std::uint64_t>(i)) % replies.size()];
      if (match) {
        for (std::size_t g = match->size(); g-- > 1;) {
          reply = replace_all(std::move(reply), "$" + std::to_string(g), (*match)[g].str());
        }
      }
      out.push_back(std::move(reply));
    }
    return out;
  }

  std::vector<ScriptedRule> rules_;
  std::vector<std::optional<std::regex>> compiled_;
  std::vector<std::string> fallback_;
  std::string id_;
};

// ---------------------------------------------------------------------------
// Voting

enum class Vote { Yes, No, Abstain };

/// Reads a leading yes/no answer; anything else abstains.
inline Vote classify_yes_no(std::string_view text) {
  std::string t = to_lower(trim(text));
  while (!t.empty() && (t.front() == '"' || t.front() == '\'' || t.front() == '*')) t.erase(t.begin());
  auto starts_word = [&t](std::string_view w) {
    return t.rfind(w, 0) == 0 && (t.size() == w.size() || !std::isalpha(static_cast<unsigned char>(t[w.size()])));
  };
  if (starts_word("yes")) return Vote::Yes;
  if (starts_word("no")) return Vote::No;
  return Vote::Abstain;
}

struct VoteTally {
  int yes = 0;
  int no = 0;
  int abstain = 0;
};

template <typename Classifier = Vote (*)(std::string_view)>
VoteTally tally_votes(const std::vector<std::string>& samples, Classifier classify = classify_yes_no) {
  VoteTally t;
  for (const auto& s : samples) {
    switch (classify(s)) {
      case Vote::Yes: ++t.yes; break;
      case Vote::No: ++t.no; break;
      case Vote::Abstain: ++t.abstain; break;
    }
  }
  return t;
}

/// Strict majority of yes over no; ties and all-abstain are negative.
template <typename Classifier = Vote (*)(std::string_view)>
bool majority_vote(const std::vector<std::string>& samples, Classifier classify = classify_yes_no) {
  if (samples.empty()) throw Error(ErrorCode::Contract, "majority_vote needs at least one sample");
  const auto t = tally_votes(samples, classify);
  return t.yes > t.no;
}

}  // namespace dialplan
