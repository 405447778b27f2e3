#pragma once

#include "dialplan/common.hpp"
#include "dialplan/gateway.hpp"

#include <json.hpp>

#include <array>
#include <compare>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifndef DIALPLAN_CATALOG_PATH
#define DIALPLAN_CATALOG_PATH "data/catalog.json"
#endif

namespace dialplan {

/// SHA-256 of the bundled data/catalog.json. Prompt wording is part of the
/// engine's behaviour, so the bundled catalog refuses to load if it drifts.
inline constexpr std::string_view kBundledCatalogSha256 =
    "d5ecd179b47102585bc8791cd08433cdd0964265929d758e891fdf6e24dae815";

enum class TaskKind { PriceNegotiation, CharityPersuasion };

inline constexpr std::array<TaskKind, 2> kAllTasks{TaskKind::PriceNegotiation, TaskKind::CharityPersuasion};

inline std::string_view to_string(TaskKind t) { return t == TaskKind::PriceNegotiation ? "cb" : "p4g"; }

inline TaskKind parse_task(std::string_view s) {
  const auto v = to_lower(s);
  if (v == "cb" || v == "price_negotiation" || v == "pricenegotiation") return TaskKind::PriceNegotiation;
  if (v == "p4g" || v == "charity_persuasion" || v == "charitypersuasion") return TaskKind::CharityPersuasion;
  throw Error(ErrorCode::Validation, "unknown task '" + std::string(s) + "'");
}

struct AgentStrategy {
  TaskKind task{};
  std::size_t index = 0;  // position in the task's catalog order
  std::string name;
  std::string instruction;
  std::string scripted_line;  // canned utterance for the template agent

  friend bool operator==(const AgentStrategy& a, const AgentStrategy& b) {
    return a.task == b.task && a.name == b.name;
  }
};

struct ResistingStrategy {
  TaskKind task{};
  std::size_t index = 0;
  std::string name;
  std::string explanation;

  friend bool operator==(const ResistingStrategy& a, const ResistingStrategy& b) {
    return a.task == b.task && a.name == b.name;
  }
};

// ---------------------------------------------------------------------------
// Personas

enum class BigFive { Openness, Conscientiousness, Extraversion, Agreeableness, Neuroticism };
enum class DecisionStyle { Directive, Conceptual, Analytical, Behavioral };

inline constexpr std::array<BigFive, 5> kBigFive{BigFive::Openness, BigFive::Conscientiousness, BigFive::Extraversion,
                                                 BigFive::Agreeableness, BigFive::Neuroticism};
inline constexpr std::array<DecisionStyle, 4> kDecisionStyles{DecisionStyle::Directive, DecisionStyle::Conceptual,
                                                              DecisionStyle::Analytical, DecisionStyle::Behavioral};

inline std::string_view to_string(BigFive b) {
  switch (b) {
    case BigFive::Openness: return "openness";
    case BigFive::Conscientiousness: return "conscientiousness";
    case BigFive::Extraversion: return "extraversion";
    case BigFive::Agreeableness: return "agreeableness";
    case BigFive::Neuroticism: return "neuroticism";
  }
  return "";
}

inline std::string_view to_string(DecisionStyle d) {
  switch (d) {
    case DecisionStyle::Directive: return "directive";
    case DecisionStyle::Conceptual: return "conceptual";
    case DecisionStyle::Analytical: return "analytical";
    case DecisionStyle::Behavioral: return "behavioral";
  }
  return "";
}

struct PersonaCategory {
  BigFive big_five{};
  DecisionStyle decision_style{};

  /// Position in enumerate_personas(): Big-Five outer, decision style inner.
  std::size_t index() const {
    return static_cast<std::size_t>(big_five) * kDecisionStyles.size() + static_cast<std::size_t>(decision_style);
  }

  static PersonaCategory from_index(std::size_t i) {
    if (i >= kBigFive.size() * kDecisionStyles.size()) {
      throw Error(ErrorCode::Validation, "persona index out of range: " + std::to_string(i));
    }
    return {kBigFive[i / kDecisionStyles.size()], kDecisionStyles[i % kDecisionStyles.size()]};
  }

  std::string label() const { return std::string(to_string(big_five)) + "/" + std::string(to_string(decision_style)); }

  friend auto operator<=>(const PersonaCategory& a, const PersonaCategory& b) { return a.index() <=> b.index(); }
  friend bool operator==(const PersonaCategory& a, const PersonaCategory& b) { return a.index() == b.index(); }
};

inline constexpr std::size_t kPersonaCount = kBigFive.size() * kDecisionStyles.size();

/// All 20 persona categories in the fixed population order.
inline std::vector<PersonaCategory> enumerate_personas() {
  std::vector<PersonaCategory> out;
  out.reserve(kPersonaCount);
  for (auto b : kBigFive) {
    for (auto d : kDecisionStyles) out.push_back({b, d});
  }
  return out;
}

/// Persona list export: one record per category with its index.
inline nlohmann::json persona_list_json() {
  auto out = nlohmann::json::array();
  for (const auto& p : enumerate_personas()) {
    out.push_back({{"index", p.index()},
                   {"big_five", std::string(to_string(p.big_five))},
                   {"decision_style", std::string(to_string(p.decision_style))}});
  }
  return out;
}

struct PersonaProfile {
  PersonaCategory category;
  std::string description;
};

class PersonaRenderer {
 public:
  virtual ~PersonaRenderer() = default;
  /// `variant` distinguishes several descriptions of the same category.
  virtual PersonaProfile render(PersonaCategory category, std::size_t variant = 0) const = 0;
};

/// Deterministic description built from fixed phrase tables.
class TemplatePersonaRenderer final : public PersonaRenderer {
 public:
  PersonaProfile render(PersonaCategory category, std::size_t variant = 0) const override {
    static constexpr std::array<std::string_view, 5> kTraitGloss{
        "curious, imaginative, and willing to try new things",
        "organized, dependable, and careful to follow through on commitments",
        "outgoing, energetic, and comfortable speaking your mind",
        "warm, cooperative, and eager to keep interactions friendly",
        "easily worried, sensitive to stress, and wary of making mistakes",
    };
    static constexpr std::array<std::string_view, 4> kStyleGloss{
        "you prefer quick, practical decisions and rely on your own experience and rules",
        "you look at the big picture and weigh creative, long-term possibilities",
        "you carefully consider all available information before making a choice",
        "you value people's feelings and seek agreement and support from others",
    };
    static constexpr std::array<std::string_view, 5> kAges{"24", "31", "38", "46", "57"};
    static constexpr std::array<std::string_view, 6> kRoles{
        "teacher", "software developer", "nurse", "small business owner", "graduate student", "accountant"};
    static constexpr std::array<std::string_view, 2> kPerson{"woman", "man"};

    // Mixed-radix decode: 60 distinct identities per category.
    const auto b = static_cast<std::size_t>(category.big_five);
    const auto d = static_cast<std::size_t>(category.decision_style);
    const std::size_t age = variant % kAges.size();
    const std::size_t role = (variant / kAges.size()) % kRoles.size();
    const std::size_t pronoun = (variant / (kAges.size() * kRoles.size())) % kPerson.size();
    std::ostringstream os;
    os << "You are a " << kAges[age] << "-year-old " << kPerson[pronoun] << " working as a " << kRoles[role]
       << ". Your personality is characterized by " << to_string(category.big_five) << ", which means you are "
       << kTraitGloss[b] << ". Your decision-making style is " << to_string(category.decision_style) << ", meaning "
       << kStyleGloss[d] << ".";
    return {category, os.str()};
  }
};

// ---------------------------------------------------------------------------
// Catalog

struct ResponseStrategyLine {
  std::string name;
  std::string text;
};

class Catalog {
 public:
  static Catalog load(const std::filesystem::path& path, std::optional<std::string_view> expected_sha256 = std::nullopt) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open catalog " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), expected_sha256);
  }

  static Catalog parse(const std::string& text, std::optional<std::string_view> expected_sha256 = std::nullopt) {
    Catalog c;
    c.sha256_ = sha256_hex(text);
    if (expected_sha256 && c.sha256_ != *expected_sha256) {
      throw Error(ErrorCode::CatalogIntegrity,
                  "catalog hash " + c.sha256_ + " does not match expected " + std::string(*expected_sha256));
    }
    try {
      const auto doc = nlohmann::json::parse(text);
      c.version_ = doc.at("catalog_version").get<int>();
      for (const auto& r : doc.at("agent_strategies")) {
        const auto task = parse_task(r.at("task").get<std::string>());
        auto& list = c.agent_[task];
        list.push_back({task, list.size(), r.at("name").get<std::string>(), r.at("instruction").get<std::string>(),
                        r.value("scripted_line", "")});
      }
      for (const auto& r : doc.at("resisting_strategies")) {
        const auto task = parse_task(r.at("task").get<std::string>());
        auto& list = c.resisting_[task];
        list.push_back({task, list.size(), r.at("name").get<std::string>(), r.at("explanation").get<std::string>()});
      }
      for (const auto& [task_name, lines] : doc.at("simulator_response_strategies").items()) {
        auto& out = c.response_lines_[parse_task(task_name)];
        for (const auto& l : lines) out.push_back({l.at("name").get<std::string>(), l.at("text").get<std::string>()});
      }
      for (const auto& [key, value] : doc.at("scripted_user_lines").items()) {
        if (value.is_string()) {
          c.prompts_["user_line." + key] = value.get<std::string>();
        } else {
          for (const auto& [name, line] : value.items()) c.prompts_["user_line." + key + "." + name] = line.get<std::string>();
        }
      }
      for (const auto& [key, value] : doc.at("prompts").items()) c.prompts_[key] = value.get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::CatalogIntegrity, std::string("malformed catalog: ") + e.what());
    }
    c.check_closed();
    return c;
  }

  /// Path of the bundled catalog; DIALPLAN_CATALOG in the environment wins.
  static std::filesystem::path default_path() {
    if (const char* env = std::getenv("DIALPLAN_CATALOG"); env && *env) return env;
    return DIALPLAN_CATALOG_PATH;
  }

  /// Process-wide bundled catalog, verified against kBundledCatalogSha256.
  static const Catalog& bundled() {
    static const Catalog instance = load(default_path(), kBundledCatalogSha256);
    return instance;
  }

  int version() const { return version_; }
  const std::string& sha256() const { return sha256_; }

  const std::vector<AgentStrategy>& agent_strategies(TaskKind task) const { return agent_.at(task); }
  const std::vector<ResistingStrategy>& resisting_strategies(TaskKind task) const { return resisting_.at(task); }
  const std::vector<ResponseStrategyLine>& simulator_response_strategies(TaskKind task) const {
    return response_lines_.at(task);
  }
  std::size_t strategy_count(TaskKind task) const { return agent_.at(task).size(); }

  const AgentStrategy& strategy(TaskKind task, std::string_view name) const {
    for (const auto& s : agent_.at(task)) {
      if (s.name == name) return s;
    }
    throw Error(ErrorCode::CatalogMiss,
                "no agent strategy '" + std::string(name) + "' for task " + std::string(to_string(task)));
  }

  const AgentStrategy& strategy(TaskKind task, std::size_t index) const {
    const auto& list = agent_.at(task);
    if (index >= list.size()) throw Error(ErrorCode::CatalogMiss, "agent strategy index out of range");
    return list[index];
  }

  const ResistingStrategy& resisting(TaskKind task, std::string_view name) const {
    for (const auto& s : resisting_.at(task)) {
      if (s.name == name) return s;
    }
    throw Error(ErrorCode::CatalogMiss,
                "no resisting strategy '" + std::string(name) + "' for task " + std::string(to_string(task)));
  }

  std::optional<ResistingStrategy> find_resisting(TaskKind task, std::string_view name) const {
    for (const auto& s : resisting_.at(task)) {
      if (to_lower(s.name) == to_lower(name)) return s;
    }
    return std::nullopt;
  }

  /// Instruction attached to an agent strategy, verbatim.
  const std::string& instruction(TaskKind task, std::string_view name) const { return strategy(task, name).instruction; }

  const std::string& prompt(std::string_view key) const {
    const auto it = prompts_.find(std::string(key));
    if (it == prompts_.end()) throw Error(ErrorCode::CatalogMiss, "no catalog prompt '" + std::string(key) + "'");
    return it->second;
  }

  bool has_prompt(std::string_view key) const { return prompts_.contains(std::string(key)); }

  friend bool operator==(const Catalog& a, const Catalog& b) {
    return a.sha256_ == b.sha256_ && a.version_ == b.version_ && a.agent_ == b.agent_ && a.resisting_ == b.resisting_ &&
           a.prompts_ == b.prompts_;
  }

 private:
  void check_closed() const {
    for (auto task : kAllTasks) {
      if (!agent_.contains(task) || !resisting_.contains(task) || !response_lines_.contains(task)) {
        throw Error(ErrorCode::CatalogIntegrity, "catalog lacks entries for task " + std::string(to_string(task)));
      }
      const auto& list = agent_.at(task);
      for (std::size_t i = 0; i < list.size(); ++i) {
        for (std::size_t j = i + 1; j < list.size(); ++j) {
          if (list[i].name == list[j].name) throw Error(ErrorCode::CatalogIntegrity, "duplicate strategy " + list[i].name);
        }
      }
    }
  }

  int version_ = 0;
  std::string sha256_;
  std::map<TaskKind, std::vector<AgentStrategy>> agent_;
  std::map<TaskKind, std::vector<ResistingStrategy>> resisting_;
  std::map<TaskKind, std::vector<ResponseStrategyLine>> response_lines_;
  std::map<std::string, std::string> prompts_;
};

/// Instruction text for a named strategy of `task`, from the bundled catalog.
inline const std::string& strategy_instruction(TaskKind task, std::string_view name) {
  return Catalog::bundled().instruction(task, name);
}

/// Persona description produced by a text-generation backend using the
/// catalog's rephrase prompt.
class LlmPersonaRenderer final : public PersonaRenderer {
 public:
  LlmPersonaRenderer(BackendPtr backend, const Catalog& catalog, RetryPolicy retry = {})
      : backend_(std::move(backend)), catalog_(&catalog), retry_(retry) {}

  PersonaProfile render(PersonaCategory category, std::size_t variant = 0) const override {
    CompletionRequest req;
    req.system_prompt = replace_all(replace_all(catalog_->prompt("persona_rephrase"), "{big_five}",
                                                to_string(category.big_five)),
                                    "{decision_style}", to_string(category.decision_style));
    req.messages.push_back({"user", "Write persona description number " + std::to_string(variant + 1) + "."});
    req.temperature = 0.7;
    req.max_tokens = 300;
    try {
      auto reply = complete(req, *backend_, retry_);
      auto text = std::string(trim(reply.samples.front()));
      if (text.empty()) throw Error(ErrorCode::Generation, "empty persona description from " + backend_->id());
      return {category, std::move(text)};
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Generation) throw;
      throw Error(ErrorCode::Generation, std::string("persona rendering failed: ") + e.what());
    }
  }

 private:
  BackendPtr backend_;
  const Catalog* catalog_;
  RetryPolicy retry_;
};

}  // namespace dialplan
