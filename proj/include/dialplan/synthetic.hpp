#pragma once

// Scripted environments with a known best response per persona, and a
// generator for strategy-annotated dialogues used as SFT data.

#include "dialplan/episode.hpp"

#include <json.hpp>

namespace dialplan {

struct SyntheticEnvironment {
  TaskKind task{};
  int max_turns = 10;
  Scenario scenario;
  std::vector<std::shared_ptr<const ScriptedProfile>> profiles;
  std::vector<std::size_t> best_strategy;  // catalog index per persona
  std::vector<std::string> signal;         // resisting strategy each persona always shows
  Population population;                   // uniform over all personas

  std::size_t size() const { return profiles.size(); }

  /// Population holding only persona `i`.
  Population single(std::size_t i) const { return single_member_population(population.members.at(i)); }

  /// Population of every persona except those listed.
  Population without(std::size_t i) const {
    Population p;
    for (std::size_t k = 0; k < population.members.size(); ++k) {
      if (k != i) p.members.push_back(population.members[k]);
    }
    p.weights.assign(p.members.size(), 1.0 / static_cast<double>(p.members.size()));
    return p;
  }
};

/// `personas` scripted users (at most 8) with pairwise distinct best
/// strategies and signal resisting strategies. Always using the best strategy
/// converts a user within max_turns with probability `matched`; never using
/// it, with probability `mismatched`.
inline SyntheticEnvironment make_synthetic_environment(const Catalog& catalog, std::size_t personas = 3,
                                                       TaskKind task = TaskKind::CharityPersuasion,
                                                       double matched = 0.9, double mismatched = 0.2,
                                                       int max_turns = 10) {
  const auto k = catalog.strategy_count(task);
  const auto& resisting = catalog.resisting_strategies(task);
  if (personas < 2 || personas > resisting.size() || personas > k) {
    throw Error(ErrorCode::Validation, "synthetic environment supports 2.." + std::to_string(resisting.size()) +
                                           " personas");
  }
  SyntheticEnvironment env;
  env.task = task;
  env.max_turns = max_turns;
  env.scenario = default_scenarios(task).front();
  const TemplatePersonaRenderer renderer;
  const std::size_t stride = kPersonaCount / personas;
  for (std::size_t i = 0; i < personas; ++i) {
    const auto cat = PersonaCategory::from_index(i * stride);
    const std::size_t best = (1 + 3 * i) % k;
    const auto& sig = resisting[i].name;
    auto profile = make_synthetic_profile(task, cat, best, sig, catalog, matched, mismatched, max_turns);
    env.best_strategy.push_back(best);
    env.signal.push_back(sig);
    auto spec = make_scripted_spec("synthetic-" + std::to_string(i), renderer.render(cat, 0), profile, catalog);
    env.profiles.push_back(std::get<std::shared_ptr<const ScriptedProfile>>(spec.backend));
    env.population.members.push_back(std::move(spec));
  }
  env.population.weights.assign(personas, 1.0 / static_cast<double>(personas));
  return env;
}

// ---------------------------------------------------------------------------
// Annotated corpus

struct AnnotatedTurn {
  std::string agent_strategy;
  std::string agent_text;
  std::string user_text;
  std::optional<std::string> resisting;
};

struct AnnotatedDialogue {
  std::string id;
  TaskKind task{};
  std::size_t persona_index = 0;
  std::string scenario_id;
  std::vector<AnnotatedTurn> turns;
};

struct CorpusConfig {
  std::size_t examples = 200;      // annotated agent turns in total
  double expert_accuracy = 0.9;    // share of turns using the persona's best strategy
  std::size_t opener_strategy = 0;  // fixed label of every first turn
  std::uint64_t seed = 0;
};

/// Rolls out an annotating expert against the environment's personas in
/// round-robin order until `cfg.examples` agent turns are collected.
inline std::vector<AnnotatedDialogue> generate_corpus(const SyntheticEnvironment& env, const Catalog& catalog,
                                                      const CorpusConfig& cfg = {}) {
  const auto k = catalog.strategy_count(env.task);
  std::vector<AnnotatedDialogue> out;
  std::size_t collected = 0;
  TemplateResponder responder;
  for (std::size_t d = 0; collected < cfg.examples; ++d) {
    const std::size_t who = d % env.size();
    Rng rng(derive_seed(cfg.seed, d));
    ScriptedSimulator user(env.profiles[who], catalog);
    auto state = DialogueState::start(env.scenario, env.max_turns);
    AnnotatedDialogue dlg;
    dlg.id = "corpus-" + std::to_string(d);
    dlg.task = env.task;
    dlg.persona_index = env.population.members[who].persona.category.index();
    dlg.scenario_id = env.scenario.id;
    while (state.ongoing() && collected < cfg.examples) {
      std::size_t label = cfg.opener_strategy;
      if (state.turn_count > 0) {
        label = env.best_strategy[who];
        if (!bernoulli(rng, cfg.expert_accuracy)) {
          label = (label + 1 + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(k - 1))) % k;
        }
      }
      const auto& strategy = catalog.strategy(env.task, label);
      Utterance agent{Speaker::Agent, responder.respond(state, strategy), strategy.name, std::nullopt, 0};
      state = advance(state, agent);
      auto reply = user.respond(state, strategy.name, rng);
      state = advance(state, reply);
      dlg.turns.push_back({strategy.name, agent.text, reply.text, reply.resisting_strategy});
      ++collected;
      if (user.user_state().converted || state.turn_count >= state.max_turns) {
        state = conclude(state, TerminationStatus::of(user.user_state().converted ? Outcome::SuccessDonation
                                                                                   : Outcome::FailureMaxTurns));
      }
    }
    out.push_back(std::move(dlg));
  }
  return out;
}

inline nlohmann::json to_json(const AnnotatedDialogue& d) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : d.turns) {
    nlohmann::json j{{"strategy", t.agent_strategy}, {"agent", t.agent_text}, {"user", t.user_text}};
    if (t.resisting) j["resisting"] = *t.resisting;
    turns.push_back(std::move(j));
  }
  return {{"id", d.id},
          {"task", std::string(to_string(d.task))},
          {"persona_index", d.persona_index},
          {"scenario_id", d.scenario_id},
          {"turns", turns}};
}

inline AnnotatedDialogue annotated_dialogue_from_json(const nlohmann::json& j) {
  AnnotatedDialogue d;
  d.id = j.value("id", "");
  d.task = parse_task(j.at("task").get<std::string>());
  d.persona_index = j.value("persona_index", std::size_t{0});
  d.scenario_id = j.value("scenario_id", "");
  for (const auto& t : j.at("turns")) {
    AnnotatedTurn turn;
    turn.agent_strategy = t.at("strategy").get<std::string>();
    turn.agent_text = t.at("agent").get<std::string>();
    turn.user_text = t.at("user").get<std::string>();
    if (t.contains("resisting")) turn.resisting = t.at("resisting").get<std::string>();
    d.turns.push_back(std::move(turn));
  }
  return d;
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<AnnotatedDialogue>& corpus) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write corpus " + path.string());
  for (const auto& d : corpus) out << to_json(d).dump() << '\n';
}

inline std::vector<AnnotatedDialogue> read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::NotFound, "corpus not found: " + path.string());
  std::vector<AnnotatedDialogue> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      out.push_back(annotated_dialogue_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::Validation, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// One example per annotated agent turn: features of the preceding history
/// and the annotated strategy as label.
inline std::vector<SftExample> sft_examples(const std::vector<AnnotatedDialogue>& corpus, const FeatureEncoder& encoder,
                                            const TomEngine& tom, const Catalog& catalog) {
  std::vector<SftExample> out;
  for (const auto& d : corpus) {
    std::vector<Utterance> history;
    int turn = 0;
    for (const auto& t : d.turns) {
      ++turn;
      const auto label = catalog.strategy(d.task, t.agent_strategy).index;
      out.push_back({encoder.encode(history, tom.infer(history, d.task)), label});
      history.push_back({Speaker::Agent, t.agent_text, t.agent_strategy, std::nullopt, turn});
      history.push_back({Speaker::User, t.user_text, std::nullopt, t.resisting, turn});
    }
  }
  return out;
}

}  // namespace dialplan
