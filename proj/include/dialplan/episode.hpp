#pragma once

#include "dialplan/planner.hpp"
#include "dialplan/reward.hpp"
#include "dialplan/tom.hpp"
#include "dialplan/user_simulator.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>

namespace dialplan {

// ---------------------------------------------------------------------------
// Agent utterances

class AgentResponder {
 public:
  virtual ~AgentResponder() = default;
  virtual std::string respond(const DialogueState& state, const AgentStrategy& strategy) = 0;
};

/// Fixed line per strategy; "{buyer_price}" becomes the buyer target.
class TemplateResponder final : public AgentResponder {
 public:
  std::string respond(const DialogueState& state, const AgentStrategy& strategy) override {
    return replace_all(strategy.scripted_line, "{buyer_price}", state.scenario.buyer_target.display());
  }
};

/// Backend-written utterance conditioned on the strategy instruction.
class LlmResponder final : public AgentResponder {
 public:
  LlmResponder(BackendPtr backend, const Catalog& catalog, RetryPolicy retry = {})
      : backend_(std::move(backend)), catalog_(&catalog), retry_(retry) {}

  static CompletionRequest build_prompt(const DialogueState& state, const AgentStrategy& strategy,
                                        const Catalog& catalog) {
    CompletionRequest req;
    const auto& sc = state.scenario;
    if (state.task() == TaskKind::PriceNegotiation) {
      std::string text = catalog.prompt("agent_cb");
      text = replace_all(std::move(text), "{item_name}", sc.item_name);
      text = replace_all(std::move(text), "{buyer_price}", sc.buyer_target.display());
      text = replace_all(std::move(text), "{item_description}", sc.item_description);
      req.system_prompt = replace_all(std::move(text), "{action}", strategy.instruction);
    } else {
      req.system_prompt = replace_all(catalog.prompt("agent_p4g"), "{action}", strategy.instruction);
    }
    req.system_prompt += "\n" + strategy.instruction;
    for (const auto& u : state.history) {
      req.messages.push_back({u.speaker == Speaker::Agent ? "assistant" : "user", u.text});
    }
    req.max_tokens = 96;
    return req;
  }

  std::string respond(const DialogueState& state, const AgentStrategy& strategy) override {
    auto reply = complete(build_prompt(state, strategy, *catalog_), *backend_, retry_).samples.front();
    auto text = std::string(trim(reply));
    if (text.empty()) throw Error(ErrorCode::Generation, "agent backend returned an empty utterance");
    return text;
  }

 private:
  BackendPtr backend_;
  const Catalog* catalog_;
  RetryPolicy retry_;
};

// ---------------------------------------------------------------------------
// Goal detection

/// Rule set answering the judge questions from surface cues: a seller line
/// like "Deal at $180. I accept." or "I accept $200", and a persuadee line
/// containing "will donate".
inline std::shared_ptr<ScriptedBackend> heuristic_judge() {
  static const nlohmann::json kRules = nlohmann::json::parse(R"json({
    "rules": [
      {"when": "agreed price", "pattern": "(?:[Aa]ccept|[Dd]eal)[^\\n$]*\\$(\\d[\\d,]*(?:\\.\\d+)?)", "reply": "$1"},
      {"when": "reached a deal", "pattern": "(?:[Aa]ccept|[Dd]eal)[^\\n$]*\\$\\d", "reply": "Yes"},
      {"when": "reached a deal", "reply": "No"},
      {"when": "interested in donating", "pattern": "(?:[Ww]ill|'ll|[Ww]ould like to|[Hh]appy to) donate", "reply": "Yes"},
      {"when": "interested in donating", "reply": "No"}
    ],
    "default": "No"
  })json");
  return std::make_shared<ScriptedBackend>(ScriptedBackend::from_json(kRules, "heuristic-judge"));
}

struct GoalDetector {
  BackendPtr judge;  // deal judge; also answers for human persuadees
  JudgeConfig config{};
  bool donation_by_judge = false;

  GoalStatus detect(const DialogueState& state, UserSimulator* user, const Catalog& catalog) const {
    if (state.task() == TaskKind::PriceNegotiation) {
      if (!judge) throw Error(ErrorCode::Contract, "price negotiation needs a judge backend");
      return detect_deal(state, *judge, catalog, config);
    }
    if (donation_by_judge || !user) {
      if (!judge) throw Error(ErrorCode::Contract, "donation check without a simulator needs a judge backend");
      return detect_donation_by_judge(state, *judge, catalog, config);
    }
    return detect_donation(state, *user, catalog, config);
  }
};

// ---------------------------------------------------------------------------
// Episodes

struct StepLog {
  std::vector<double> features;
  std::size_t action = 0;
};

struct EpisodeRecord {
  std::string episode_id;
  std::string source = "simulator";  // "human" for live sessions
  std::string simulator_id;
  std::optional<PersonaCategory> persona;  // absent for human sessions
  TaskKind task{};
  std::string scenario_id;
  std::uint64_t seed = 0;
  std::vector<std::string> strategy_sequence;
  std::vector<std::string> resisting_sequence;  // "" where the user gave none
  std::vector<double> per_turn_rewards;
  std::vector<double> returns;
  TerminationStatus outcome;
  std::optional<double> sl_ratio;
  int turns = 0;
  std::vector<Utterance> transcript;
  bool valid = true;
  std::string invalid_reason;
  int tom_truncations = 0;
  int tom_degraded = 0;
  bool sl_out_of_range = false;
  std::vector<StepLog> steps;  // rollout-only; not archived

  std::optional<Money> deal_price() const { return outcome.deal_price; }
  bool success() const { return is_success(outcome.outcome); }
};

inline constexpr int kArchiveSchemaVersion = 1;

inline nlohmann::json to_json(const Utterance& u) {
  nlohmann::json j{{"speaker", u.speaker == Speaker::Agent ? "agent" : "user"}, {"text", u.text}, {"turn", u.turn_index}};
  if (u.agent_strategy) j["strategy"] = *u.agent_strategy;
  if (u.resisting_strategy) j["resisting"] = *u.resisting_strategy;
  return j;
}

inline Utterance utterance_from_json(const nlohmann::json& j) {
  Utterance u;
  u.speaker = j.at("speaker").get<std::string>() == "agent" ? Speaker::Agent : Speaker::User;
  u.text = j.at("text").get<std::string>();
  u.turn_index = j.value("turn", 0);
  if (j.contains("strategy")) u.agent_strategy = j.at("strategy").get<std::string>();
  if (j.contains("resisting")) u.resisting_strategy = j.at("resisting").get<std::string>();
  return u;
}

inline nlohmann::json to_json(const EpisodeRecord& r) {
  nlohmann::json transcript = nlohmann::json::array();
  for (const auto& u : r.transcript) transcript.push_back(to_json(u));
  nlohmann::json j{{"schema_version", kArchiveSchemaVersion},
                   {"episode_id", r.episode_id},
                   {"source", r.source},
                   {"simulator_id", r.simulator_id},
                   {"task", std::string(to_string(r.task))},
                   {"scenario_id", r.scenario_id},
                   {"seed", r.seed},
                   {"strategy_sequence", r.strategy_sequence},
                   {"resisting_sequence", r.resisting_sequence},
                   {"per_turn_rewards", r.per_turn_rewards},
                   {"returns", r.returns},
                   {"outcome", std::string(to_string(r.outcome.outcome))},
                   {"turns", r.turns},
                   {"valid", r.valid},
                   {"transcript", transcript}};
  j["persona_index"] = r.persona ? nlohmann::json(r.persona->index()) : nlohmann::json(nullptr);
  j["persona"] = r.persona ? nlohmann::json(r.persona->label()) : nlohmann::json(nullptr);
  j["deal_price"] = r.outcome.deal_price ? nlohmann::json(r.outcome.deal_price->str()) : nlohmann::json(nullptr);
  j["sl_ratio"] = r.sl_ratio ? nlohmann::json(*r.sl_ratio) : nlohmann::json(nullptr);
  if (!r.valid) j["invalid_reason"] = r.invalid_reason;
  if (r.tom_truncations) j["tom_truncations"] = r.tom_truncations;
  if (r.tom_degraded) j["tom_degraded"] = r.tom_degraded;
  if (r.sl_out_of_range) j["sl_out_of_range"] = true;
  return j;
}

inline EpisodeRecord episode_from_json(const nlohmann::json& j) {
  const int v = j.value("schema_version", 0);
  if (v != kArchiveSchemaVersion) {
    throw Error(ErrorCode::Validation, "unsupported archive schema version " + std::to_string(v));
  }
  EpisodeRecord r;
  r.episode_id = j.at("episode_id").get<std::string>();
  r.source = j.value("source", "simulator");
  r.simulator_id = j.value("simulator_id", "");
  if (j.contains("persona_index") && !j.at("persona_index").is_null()) {
    r.persona = PersonaCategory::from_index(j.at("persona_index").get<std::size_t>());
  }
  r.task = parse_task(j.at("task").get<std::string>());
  r.scenario_id = j.value("scenario_id", "");
  r.seed = j.value("seed", std::uint64_t{0});
  r.strategy_sequence = j.at("strategy_sequence").get<std::vector<std::string>>();
  r.resisting_sequence = j.value("resisting_sequence", std::vector<std::string>{});
  r.per_turn_rewards = j.value("per_turn_rewards", std::vector<double>{});
  r.returns = j.value("returns", std::vector<double>{});
  const auto outcome = parse_outcome(j.at("outcome").get<std::string>());
  std::optional<Money> price;
  if (j.contains("deal_price") && !j.at("deal_price").is_null()) price = Money::parse(j.at("deal_price").get<std::string>());
  r.outcome = TerminationStatus::of(outcome, price);
  if (j.contains("sl_ratio") && !j.at("sl_ratio").is_null()) r.sl_ratio = j.at("sl_ratio").get<double>();
  r.turns = j.at("turns").get<int>();
  r.valid = j.value("valid", true);
  r.invalid_reason = j.value("invalid_reason", "");
  r.tom_truncations = j.value("tom_truncations", 0);
  r.tom_degraded = j.value("tom_degraded", 0);
  r.sl_out_of_range = j.value("sl_out_of_range", false);
  for (const auto& u : j.value("transcript", nlohmann::json::array())) r.transcript.push_back(utterance_from_json(u));
  return r;
}

inline std::string archive_line(const EpisodeRecord& r) { return to_json(r).dump(); }

inline void write_archive(const std::filesystem::path& path, const std::vector<EpisodeRecord>& records) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write archive " + path.string());
  for (const auto& r : records) out << archive_line(r) << '\n';
}

inline void append_archive(const std::filesystem::path& path, const EpisodeRecord& record) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::Io, "cannot append to archive " + path.string());
  out << archive_line(record) << '\n';
}

inline std::vector<EpisodeRecord> read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "archive not found: " + path.string());
  std::vector<EpisodeRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Validation, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Everything an episode needs besides the policy and the simulator.
struct EpisodeEnv {
  const Catalog* catalog = nullptr;
  std::shared_ptr<const FeatureEncoder> encoder;
  TomEngine tom = TomEngine::off();
  std::shared_ptr<AgentResponder> responder = std::make_shared<TemplateResponder>();
  GoalDetector goals{};
  int max_turns = 10;
  double gamma = 0.999;
  DiscountExponent exponent = DiscountExponent::Literal;
  RewardConfig reward{};
  RetryPolicy retry{};
  bool keep_steps = true;
};

/// Environment for fully scripted runs: hashed features, the heuristic judge
/// and template agent lines.
inline EpisodeEnv scripted_env(TaskKind task, const Catalog& catalog, bool tom_enabled) {
  EpisodeEnv env;
  env.catalog = &catalog;
  env.encoder = std::make_shared<HashedFeatureEncoder>(task, catalog);
  env.tom = tom_enabled ? TomEngine::scripted() : TomEngine::off();
  env.goals.judge = heuristic_judge();
  env.goals.config.samples = 10;
  return env;
}

namespace detail {

inline bool catchable(const Error& e) {
  switch (e.code()) {
    case ErrorCode::Gateway:
    case ErrorCode::Protocol:
    case ErrorCode::JudgeInconsistency:
    case ErrorCode::Generation:
      return true;
    default:
      return false;
  }
}

}  // namespace detail

/// One rollout. Backend failures and judge inconsistencies end the episode
/// early with valid = false; the partial record is kept for diagnostics.
inline EpisodeRecord run_episode(const PolicyParameters& params, const SimulatorSpec& simulator,
                                 const Scenario& scenario, const EpisodeEnv& env, Rng& rng, SelectMode mode) {
  if (!env.catalog || !env.encoder) throw Error(ErrorCode::Contract, "episode environment is incomplete");
  if (scenario.task != simulator.task || params.task != scenario.task) {
    throw Error(ErrorCode::Contract, "task mismatch between policy, simulator and scenario");
  }
  const Catalog& catalog = *env.catalog;
  Rng policy_rng(rng());
  Rng user_rng(rng());

  EpisodeRecord rec;
  rec.simulator_id = simulator.id;
  rec.persona = simulator.persona.category;
  rec.task = scenario.task;
  rec.scenario_id = scenario.id;

  auto state = DialogueState::start(scenario, env.max_turns);
  auto user = instantiate(simulator, catalog, env.retry);
  try {
    while (state.ongoing()) {
      const auto mental = env.tom.infer(state.history, state.task());
      rec.tom_truncations += mental.truncated_utterances;
      rec.tom_degraded += mental.degraded_parse ? 1 : 0;
      auto fv = env.encoder->encode(state.history, mental);
      const auto dist = policy_distribution(params, fv);
      const auto action = select_strategy(dist, mode, &policy_rng);
      const auto& strategy = catalog.strategy(state.task(), action);
      if (env.keep_steps) rec.steps.push_back({std::move(fv.values), action});

      Utterance agent;
      agent.speaker = Speaker::Agent;
      agent.text = env.responder->respond(state, strategy);
      agent.agent_strategy = strategy.name;
      state = advance(state, std::move(agent));
      rec.strategy_sequence.push_back(strategy.name);

      auto reply = user->respond(state, strategy.name, user_rng);
      rec.resisting_sequence.push_back(reply.resisting_strategy.value_or(""));
      state = advance(state, std::move(reply));

      const auto goal = env.goals.detect(state, user.get(), catalog);
      const auto status = is_terminal(state, goal);
      std::optional<double> sl;
      if (status.outcome == Outcome::SuccessDeal) {
        sl = sale_to_list_ratio(*status.deal_price, scenario.seller_target, scenario.buyer_target);
        if (*sl < 0.0 || *sl > 1.0) rec.sl_out_of_range = true;
        rec.sl_ratio = sl;
      }
      rec.per_turn_rewards.push_back(turn_reward(state.task(), status, sl, env.reward));
      if (status.terminal) state = conclude(state, status);
    }
  } catch (const Error& e) {
    if (!detail::catchable(e)) throw;
    rec.valid = false;
    rec.invalid_reason = std::string(to_string(e.code())) + ": " + e.what();
  }
  rec.outcome = state.status;
  rec.turns = state.turn_count;
  rec.transcript = state.history;
  if (rec.valid) rec.returns = discounted_returns(rec.per_turn_rewards, env.gamma, env.exponent);
  return rec;
}

}  // namespace dialplan
