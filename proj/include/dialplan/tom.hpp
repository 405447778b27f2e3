#pragma once

#include "dialplan/catalog.hpp"
#include "dialplan/dialogue.hpp"
#include "dialplan/gateway.hpp"

#include <map>

namespace dialplan {

enum class MentalSource { Inferred, Scripted, Empty };

inline std::string_view to_string(MentalSource s) {
  switch (s) {
    case MentalSource::Inferred: return "inferred";
    case MentalSource::Scripted: return "scripted";
    case MentalSource::Empty: return "empty";
  }
  return "";
}

struct MentalModel {
  std::string mental_state;    // M
  std::string future_actions;  // F
  MentalSource source = MentalSource::Empty;
  bool degraded_parse = false;
  int truncated_utterances = 0;  // oldest utterances dropped from the prompt

  static MentalModel empty() { return {}; }
};

struct TomOptions {
  // 0 disables truncation. Otherwise the transcript is cut oldest-first to fit.
  std::size_t max_transcript_chars = 0;
  double temperature = 0.0;
  int max_tokens = 160;
  RetryPolicy retry{};
};

inline constexpr std::string_view kHistoryBanner = "********\nConversation History\n********\n";

/// Request for the inference backend. Returns the number of dropped
/// utterances through `dropped`.
inline CompletionRequest build_tom_prompt(const std::vector<Utterance>& history, TaskKind task, const Catalog& catalog,
                                          const TomOptions& options = {}, int* dropped = nullptr) {
  const bool cb = task == TaskKind::PriceNegotiation;
  CompletionRequest req;
  req.system_prompt = catalog.prompt(cb ? "tom_cb" : "tom_p4g") + "\n" + catalog.prompt("tom_format");
  req.temperature = options.temperature;
  req.max_tokens = options.max_tokens;

  std::size_t first = 0;
  std::string transcript = render_transcript(history, task);
  if (options.max_transcript_chars > 0) {
    while (transcript.size() > options.max_transcript_chars && first + 1 < history.size()) {
      ++first;
      transcript = render_transcript({history.begin() + static_cast<std::ptrdiff_t>(first), history.end()}, task);
    }
  }
  if (dropped) *dropped = static_cast<int>(first);
  req.messages.push_back({"user", std::string(kHistoryBanner) + transcript});
  return req;
}

/// Splits a "MENTAL: ... / FUTURE: ..." reply. Without both labels the whole
/// reply lands in mental_state and the parse is flagged as degraded.
inline MentalModel parse_tom_reply(std::string_view reply) {
  MentalModel m;
  m.source = MentalSource::Inferred;
  const std::string lower = to_lower(reply);
  const auto mpos = lower.find("mental:");
  const auto fpos = lower.find("future:");
  if (mpos == std::string::npos || fpos == std::string::npos) {
    m.mental_state = std::string(trim(reply));
    m.degraded_parse = true;
    return m;
  }
  auto section = [&](std::size_t start, std::size_t end) {
    return std::string(trim(reply.substr(start, end == std::string::npos ? std::string::npos : end - start)));
  };
  if (mpos < fpos) {
    m.mental_state = section(mpos + 7, fpos);
    m.future_actions = section(fpos + 7, std::string::npos);
  } else {
    m.future_actions = section(fpos + 7, mpos);
    m.mental_state = section(mpos + 7, std::string::npos);
  }
  if (m.mental_state.empty() || m.future_actions.empty()) m.degraded_parse = true;
  return m;
}

inline MentalModel infer_user_state(const std::vector<Utterance>& history, TaskKind task, Backend& backend,
                                    const Catalog& catalog, const TomOptions& options = {}) {
  if (history.empty()) return MentalModel::empty();
  int dropped = 0;
  const auto req = build_tom_prompt(history, task, catalog, options, &dropped);
  const auto reply = complete(req, backend, options.retry);
  auto m = parse_tom_reply(reply.samples.front());
  m.truncated_utterances = dropped;
  return m;
}

/// Backend-free estimate built from the user's annotated resisting moves.
inline MentalModel scripted_mental_model(const std::vector<Utterance>& history, TaskKind task) {
  if (history.empty()) return MentalModel::empty();
  std::map<std::string, int> counts;
  std::string last;
  for (const auto& u : history) {
    if (u.speaker == Speaker::User && u.resisting_strategy) {
      ++counts[*u.resisting_strategy];
      last = *u.resisting_strategy;
    }
  }
  MentalModel m;
  m.source = MentalSource::Scripted;
  const std::string who = task == TaskKind::PriceNegotiation ? "seller" : "persuadee";
  if (counts.empty()) {
    m.mental_state = "the " + who + " has not resisted yet";
    m.future_actions = "the " + who + " may agree";
    return m;
  }
  m.mental_state = "the " + who + " resists with";
  for (const auto& [name, n] : counts) m.mental_state += " " + name + " x" + std::to_string(n) + ";";
  m.future_actions = "the " + who + " will likely use " + last + " again";
  return m;
}

/// Chooses between backend inference, the scripted estimate, or nothing.
class TomEngine {
 public:
  enum class Mode { Off, Scripted, Backend };

  static TomEngine off() { return TomEngine(Mode::Off, nullptr, nullptr, {}); }
  static TomEngine scripted() { return TomEngine(Mode::Scripted, nullptr, nullptr, {}); }
  static TomEngine backed(BackendPtr backend, const Catalog& catalog, TomOptions options = {}) {
    return TomEngine(Mode::Backend, std::move(backend), &catalog, options);
  }

  Mode mode() const { return mode_; }
  bool enabled() const { return mode_ != Mode::Off; }

  MentalModel infer(const std::vector<Utterance>& history, TaskKind task) const {
    switch (mode_) {
      case Mode::Off: return MentalModel::empty();
      case Mode::Scripted: return scripted_mental_model(history, task);
      case Mode::Backend: return infer_user_state(history, task, *backend_, *catalog_, options_);
    }
    return MentalModel::empty();
  }

 private:
  TomEngine(Mode mode, BackendPtr backend, const Catalog* catalog, TomOptions options)
      : mode_(mode), backend_(std::move(backend)), catalog_(catalog), options_(options) {}

  Mode mode_;
  BackendPtr backend_;
  const Catalog* catalog_;
  TomOptions options_;
};

}  // namespace dialplan
