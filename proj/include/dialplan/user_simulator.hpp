#pragma once

#include "dialplan/catalog.hpp"
#include "dialplan/dialogue.hpp"
#include "dialplan/gateway.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <variant>

namespace dialplan {

// ---------------------------------------------------------------------------
// Scripted profiles

enum class Phase { Early, Late };

inline std::string_view to_string(Phase p) { return p == Phase::Early ? "early" : "late"; }

/// How a table delta moves the user's propensity:
///   Scaled     - propensity += delta * susceptibility
///   Stochastic - propensity += delta with probability susceptibility
enum class PropensityDynamics { Scaled, Stochastic };

struct ResponseRule {
  std::string resisting;  // resisting strategy name
  std::string text;       // may contain {ask}
  double delta = 0.0;

  friend bool operator==(const ResponseRule&, const ResponseRule&) = default;
};

struct ScriptedProfile {
  std::string id;
  TaskKind task{};
  PersonaCategory persona;
  std::map<std::pair<std::string, Phase>, ResponseRule> response_table;
  std::map<std::string, double> susceptibility;
  PropensityDynamics dynamics = PropensityDynamics::Scaled;
  double threshold = 1.0;
  int phase_split = 5;  // turns 1..phase_split are Early
  // Price negotiation: share of the target gap conceded at a first-turn deal,
  // shrinking by concession_decay for each later turn.
  double max_concession = 0.8;
  double concession_decay = 0.05;

  Phase phase_at(int turn) const { return turn <= phase_split ? Phase::Early : Phase::Late; }

  const ResponseRule& rule(const std::string& strategy, Phase phase) const {
    const auto it = response_table.find({strategy, phase});
    if (it == response_table.end()) {
      throw Error(ErrorCode::CatalogMiss, "profile " + id + " has no rule for '" + strategy + "'");
    }
    return it->second;
  }

  double susceptibility_of(const std::string& strategy) const {
    const auto it = susceptibility.find(strategy);
    return it == susceptibility.end() ? 0.0 : it->second;
  }

  void validate(const Catalog& catalog) const {
    for (const auto& s : catalog.agent_strategies(task)) {
      for (auto phase : {Phase::Early, Phase::Late}) {
        const auto& r = rule(s.name, phase);
        catalog.resisting(task, r.resisting);
      }
      const double v = susceptibility_of(s.name);
      if (!(v >= 0.0 && v <= 1.0)) {
        throw Error(ErrorCode::Validation, "profile " + id + ": susceptibility of '" + s.name + "' outside [0,1]");
      }
    }
    for (const auto& [name, _] : susceptibility) catalog.strategy(task, name);
    if (!(threshold > 0.0)) throw Error(ErrorCode::Validation, "profile " + id + ": threshold must be > 0");
  }

  /// Catalog index of the susceptibility argmax, or nullopt when tied.
  std::optional<std::size_t> best_response(const Catalog& catalog) const {
    const auto& strategies = catalog.agent_strategies(task);
    std::optional<std::size_t> best;
    double best_value = -1.0;
    bool tie = false;
    for (const auto& s : strategies) {
      const double v = susceptibility_of(s.name);
      if (v > best_value) {
        best_value = v;
        best = s.index;
        tie = false;
      } else if (v == best_value) {
        tie = true;
      }
    }
    if (tie) return std::nullopt;
    return best;
  }
};

/// Per-episode mutable state of a scripted user.
struct ScriptedUserState {
  double propensity = 0.0;
  bool converted = false;
};

namespace detail {

inline Money concession_price(const ScriptedProfile& p, const Scenario& sc, double fraction) {
  const auto gap = static_cast<double>((sc.seller_target - sc.buyer_target).cents());
  const auto off = static_cast<std::int64_t>(std::llround(gap * std::clamp(fraction, 0.0, 1.0)));
  (void)p;
  return sc.seller_target - Money::from_cents(off);
}

}  // namespace detail

/// Price the scripted seller asks after the given propensity.
inline Money scripted_ask(const ScriptedProfile& p, const Scenario& sc, double propensity) {
  return detail::concession_price(p, sc, p.max_concession * 0.5 * std::min(1.0, propensity / p.threshold));
}

/// Price a scripted seller accepts when convinced at `turn`.
inline Money scripted_deal_price(const ScriptedProfile& p, const Scenario& sc, int turn) {
  return detail::concession_price(p, sc, p.max_concession - p.concession_decay * (turn - 1));
}

/// Produces the scripted user's reply to the latest agent utterance and
/// updates `user` in place.
inline Utterance scripted_response(const ScriptedProfile& profile, ScriptedUserState& user, const DialogueState& state,
                                   const std::string& last_agent_strategy, Rng& rng, const Catalog& catalog) {
  if (!state.ongoing()) throw Error(ErrorCode::State, "scripted_response on a finished dialogue");
  const int turn = state.turn_count + 1;
  const auto& rule = profile.rule(last_agent_strategy, profile.phase_at(turn));
  const double s = profile.susceptibility_of(last_agent_strategy);
  double increment = 0.0;
  if (profile.dynamics == PropensityDynamics::Scaled) {
    increment = rule.delta * s;
  } else if (bernoulli(rng, s)) {
    increment = rule.delta;
  }
  user.propensity += increment;

  Utterance u;
  u.speaker = Speaker::User;
  if (!user.converted && user.propensity >= profile.threshold - 1e-12) user.converted = true;
  if (user.converted) {
    if (profile.task == TaskKind::PriceNegotiation) {
      const auto price = scripted_deal_price(profile, state.scenario, turn);
      u.text = replace_all(catalog.prompt("user_line.cb_accept"), "{price}", price.display());
    } else {
      u.text = catalog.prompt("user_line.p4g_donate");
    }
    return u;
  }
  u.resisting_strategy = rule.resisting;
  u.text = replace_all(rule.text, "{ask}", scripted_ask(profile, state.scenario, user.propensity).display());
  return u;
}

namespace detail {

inline std::string user_line(const Catalog& catalog, TaskKind task, const std::string& resisting) {
  return catalog.prompt("user_line." + std::string(to_string(task)) + "." + resisting);
}

inline double per_turn_probability(double episode_success, int turns) {
  return 1.0 - std::pow(1.0 - episode_success, 1.0 / static_cast<double>(turns));
}

}  // namespace detail

/// Profile with a persona-specific best response, used for default
/// populations. Early turns reveal the Big-Five signature resisting strategy,
/// later turns the decision-style one. `variant` perturbs only the
/// susceptibilities of the other strategies.
inline ScriptedProfile default_scripted_profile(TaskKind task, PersonaCategory persona, const Catalog& catalog,
                                                std::string id = {}, std::uint64_t variant = 0) {
  const auto& strategies = catalog.agent_strategies(task);
  const auto& resisting = catalog.resisting_strategies(task);
  ScriptedProfile p;
  p.id = id.empty() ? "default-" + std::string(to_string(task)) + "-" + std::to_string(persona.index()) : std::move(id);
  p.task = task;
  p.persona = persona;
  p.dynamics = PropensityDynamics::Stochastic;
  p.threshold = 1.0;
  const std::size_t best = (persona.index() * 3) % strategies.size();
  const auto& early = resisting[static_cast<std::size_t>(persona.big_five) % resisting.size()].name;
  const auto& late = resisting[(5 + static_cast<std::size_t>(persona.decision_style)) % resisting.size()].name;
  for (const auto& s : strategies) {
    const auto h = mix64(fnv1a64(s.name) ^ mix64(persona.index() + 1 + (variant << 8)));
    const double low = 0.02 + 0.10 * static_cast<double>(h % 1000) / 1000.0;
    p.susceptibility[s.name] = s.index == best ? 0.35 : low;
    p.response_table[{s.name, Phase::Early}] = {early, detail::user_line(catalog, task, early), 0.5};
    p.response_table[{s.name, Phase::Late}] = {late, detail::user_line(catalog, task, late), 0.5};
  }
  return p;
}

/// Profile for the tailoring benchmark: always answering with `signal`, and
/// converting within `max_turns` with probability `matched_success` when the
/// agent always uses `best_strategy`, `mismatched_success` when it never does.
inline ScriptedProfile make_synthetic_profile(TaskKind task, PersonaCategory persona, std::size_t best_strategy,
                                              const std::string& signal, const Catalog& catalog,
                                              double matched_success = 0.9, double mismatched_success = 0.2,
                                              int max_turns = 10) {
  ScriptedProfile p;
  p.id = "synthetic-" + std::to_string(persona.index());
  p.task = task;
  p.persona = persona;
  p.dynamics = PropensityDynamics::Stochastic;
  p.threshold = 1.0;
  const double matched = detail::per_turn_probability(matched_success, max_turns);
  const double mismatched = detail::per_turn_probability(mismatched_success, max_turns);
  const auto line = detail::user_line(catalog, task, signal);
  for (const auto& s : catalog.agent_strategies(task)) {
    p.susceptibility[s.name] = s.index == best_strategy ? matched : mismatched;
    for (auto phase : {Phase::Early, Phase::Late}) p.response_table[{s.name, phase}] = {signal, line, 1.0};
  }
  return p;
}

/// Exact probability that the profile converts within `max_turns` when the
/// agent draws its strategy at turn t (1-based) from `policy(t)`, a
/// distribution over catalog indices. Enumerates propensity states exactly.
inline double success_probability(const ScriptedProfile& profile, int max_turns, const Catalog& catalog,
                                  const std::function<std::vector<double>(int)>& policy) {
  const auto& strategies = catalog.agent_strategies(profile.task);
  std::map<double, double> open{{0.0, 1.0}};
  double converted = 0.0;
  for (int turn = 1; turn <= max_turns; ++turn) {
    const auto dist = policy(turn);
    std::map<double, double> next;
    for (const auto& [prop, mass] : open) {
      for (const auto& s : strategies) {
        const double ps = dist.at(s.index);
        if (ps <= 0.0) continue;
        const double sus = profile.susceptibility_of(s.name);
        const double delta = profile.rule(s.name, profile.phase_at(turn)).delta;
        std::vector<std::pair<double, double>> branches;
        if (profile.dynamics == PropensityDynamics::Scaled) {
          branches.push_back({prop + delta * sus, 1.0});
        } else {
          branches.push_back({prop + delta, sus});
          branches.push_back({prop, 1.0 - sus});
        }
        for (const auto& [np, pb] : branches) {
          const double m = mass * ps * pb;
          if (m <= 0.0) continue;
          if (np >= profile.threshold - 1e-12) {
            converted += m;
          } else {
            next[np] += m;
          }
        }
      }
    }
    open = std::move(next);
  }
  return converted;
}

struct OptimumReport {
  std::size_t strategy = 0;
  double success = 0.0;
};

/// Brute force over every constant strategy choice.
inline OptimumReport brute_force_optimum(const ScriptedProfile& profile, int max_turns, const Catalog& catalog) {
  const auto k = catalog.strategy_count(profile.task);
  OptimumReport best;
  best.success = -1.0;
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<double> onehot(k, 0.0);
    onehot[a] = 1.0;
    const double p = success_probability(profile, max_turns, catalog, [&](int) { return onehot; });
    if (p > best.success) best = {a, p};
  }
  return best;
}

inline nlohmann::json to_json(const ScriptedProfile& p) {
  nlohmann::json rules = nlohmann::json::array();
  for (const auto& [key, r] : p.response_table) {
    rules.push_back({{"strategy", key.first},
                     {"phase", std::string(to_string(key.second))},
                     {"resisting", r.resisting},
                     {"text", r.text},
                     {"delta", r.delta}});
  }
  return {{"id", p.id},
          {"task", std::string(to_string(p.task))},
          {"persona_index", p.persona.index()},
          {"dynamics", p.dynamics == PropensityDynamics::Scaled ? "scaled" : "stochastic"},
          {"threshold", p.threshold},
          {"phase_split", p.phase_split},
          {"max_concession", p.max_concession},
          {"concession_decay", p.concession_decay},
          {"susceptibility", p.susceptibility},
          {"rules", rules}};
}

inline ScriptedProfile scripted_profile_from_json(const nlohmann::json& j) {
  ScriptedProfile p;
  p.id = j.at("id").get<std::string>();
  p.task = parse_task(j.at("task").get<std::string>());
  p.persona = PersonaCategory::from_index(j.at("persona_index").get<std::size_t>());
  p.dynamics = j.value("dynamics", "scaled") == "stochastic" ? PropensityDynamics::Stochastic : PropensityDynamics::Scaled;
  p.threshold = j.value("threshold", 1.0);
  p.phase_split = j.value("phase_split", 5);
  p.max_concession = j.value("max_concession", 0.8);
  p.concession_decay = j.value("concession_decay", 0.05);
  p.susceptibility = j.at("susceptibility").get<std::map<std::string, double>>();
  for (const auto& r : j.at("rules")) {
    const auto phase = r.at("phase").get<std::string>() == "late" ? Phase::Late : Phase::Early;
    const auto strategy = r.at("strategy").get<std::string>();
    ResponseRule rule{r.at("resisting").get<std::string>(), r.at("text").get<std::string>(), r.at("delta").get<double>()};
    if (r.value("phase", "") == "any") {
      p.response_table[{strategy, Phase::Early}] = rule;
      p.response_table[{strategy, Phase::Late}] = rule;
    } else {
      p.response_table[{strategy, phase}] = std::move(rule);
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// Simulator specs and populations

struct LlmBacked {
  BackendPtr backend;
};

using SimulatorBackend = std::variant<LlmBacked, std::shared_ptr<const ScriptedProfile>>;

struct SimulatorSpec {
  std::string id;
  PersonaProfile persona;
  TaskKind task{};
  std::vector<ResistingStrategy> resisting_strategies;
  SimulatorBackend backend;

  bool scripted() const { return std::holds_alternative<std::shared_ptr<const ScriptedProfile>>(backend); }
  const ScriptedProfile& profile() const { return *std::get<std::shared_ptr<const ScriptedProfile>>(backend); }
};

inline SimulatorSpec make_scripted_spec(std::string id, PersonaProfile persona, ScriptedProfile profile,
                                        const Catalog& catalog) {
  profile.validate(catalog);
  SimulatorSpec spec;
  spec.id = std::move(id);
  spec.task = profile.task;
  spec.persona = std::move(persona);
  spec.resisting_strategies = catalog.resisting_strategies(spec.task);
  spec.backend = std::make_shared<const ScriptedProfile>(std::move(profile));
  return spec;
}

/// Role-play prompt for an LLM-backed user simulator.
inline CompletionRequest build_simulator_prompt(const SimulatorSpec& spec, const Scenario& scenario,
                                                const std::vector<Utterance>& history, const Catalog& catalog) {
  if (spec.task != scenario.task) throw Error(ErrorCode::Contract, "simulator task does not match scenario task");
  const bool cb = spec.task == TaskKind::PriceNegotiation;
  std::string text = catalog.prompt(cb ? "simulator_cb" : "simulator_p4g");

  std::string block;
  const auto& lines = catalog.simulator_response_strategies(spec.task);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (i) block += '\n';
    block += std::to_string(i + 1) + ". \"" + lines[i].name + "\": " + lines[i].text;
  }
  auto fill = [&text](std::string_view slot, const std::string& value) {
    const std::string key = "{" + std::string(slot) + "}";
    if (text.find(key) == std::string::npos) return;
    if (value.empty()) throw Error(ErrorCode::Template, "simulator prompt slot '" + std::string(slot) + "' is empty");
    text = replace_all(std::move(text), key, value);
  };
  fill("persona", spec.persona.description);
  fill("response_strategies", block);
  if (cb) {
    fill("item_name", scenario.item_name);
    fill("listing_price", scenario.listing_price > Money{} ? scenario.listing_price.display() : std::string{});
    fill("item_description", scenario.item_description);
  }

  CompletionRequest req;
  req.system_prompt = std::move(text);
  req.temperature = 0.7;
  req.max_tokens = 128;
  for (const auto& u : history) {
    req.messages.push_back({u.speaker == Speaker::Agent ? "user" : "assistant", u.text});
  }
  return req;
}

/// A live user-simulator instance for one episode.
class UserSimulator {
 public:
  virtual ~UserSimulator() = default;
  virtual Utterance respond(const DialogueState& state, const std::string& last_agent_strategy, Rng& rng) = 0;
  /// `samples` answers to a yes/no question about the simulator's own stance.
  virtual std::vector<std::string> answer(const DialogueState& state, const std::string& question, int samples) = 0;
};

class ScriptedSimulator final : public UserSimulator {
 public:
  ScriptedSimulator(std::shared_ptr<const ScriptedProfile> profile, const Catalog& catalog)
      : profile_(std::move(profile)), catalog_(&catalog) {}

  Utterance respond(const DialogueState& state, const std::string& last_agent_strategy, Rng& rng) override {
    return scripted_response(*profile_, user_, state, last_agent_strategy, rng, *catalog_);
  }

  std::vector<std::string> answer(const DialogueState&, const std::string&, int samples) override {
    return std::vector<std::string>(static_cast<std::size_t>(samples), user_.converted ? "Yes" : "No");
  }

  const ScriptedUserState& user_state() const { return user_; }

 private:
  std::shared_ptr<const ScriptedProfile> profile_;
  const Catalog* catalog_;
  ScriptedUserState user_;
};

class LlmSimulator final : public UserSimulator {
 public:
  LlmSimulator(SimulatorSpec spec, const Catalog& catalog, RetryPolicy retry = {})
      : spec_(std::move(spec)), catalog_(&catalog), retry_(retry) {}

  Utterance respond(const DialogueState& state, const std::string&, Rng&) override {
    auto req = build_simulator_prompt(spec_, state.scenario, state.history, *catalog_);
    auto reply = complete(req, backend(), retry_);
    Utterance u;
    u.speaker = Speaker::User;
    std::string text(trim(reply.samples.front()));
    // Optional "[Strategy]" or "Strategy:" lead-in naming the response strategy.
    for (const auto& r : catalog_->resisting_strategies(spec_.task)) {
      for (const auto& lead : {"[" + r.name + "]", "\"" + r.name + "\":", r.name + ":"}) {
        if (text.rfind(lead, 0) == 0) {
          u.resisting_strategy = r.name;
          text = std::string(trim(std::string_view(text).substr(lead.size())));
        }
      }
    }
    u.text = text.empty() ? "..." : text;
    return u;
  }

  std::vector<std::string> answer(const DialogueState& state, const std::string& question, int samples) override {
    auto req = build_simulator_prompt(spec_, state.scenario, state.history, *catalog_);
    if (!req.messages.empty() && req.messages.back().role == "user") {
      req.messages.back().content += "\n\n" + question;
    } else {
      req.messages.push_back({"user", question});
    }
    req.sample_count = samples;
    return complete(req, backend(), retry_).samples;
  }

 private:
  Backend& backend() const {
    const auto& b = std::get<LlmBacked>(spec_.backend).backend;
    if (!b) throw Error(ErrorCode::Gateway, "simulator " + spec_.id + " has no backend");
    return *b;
  }

  SimulatorSpec spec_;
  const Catalog* catalog_;
  RetryPolicy retry_;
};

inline std::unique_ptr<UserSimulator> instantiate(const SimulatorSpec& spec, const Catalog& catalog,
                                                  RetryPolicy retry = {}) {
  if (spec.scripted()) {
    return std::make_unique<ScriptedSimulator>(std::get<std::shared_ptr<const ScriptedProfile>>(spec.backend), catalog);
  }
  return std::make_unique<LlmSimulator>(spec, catalog, retry);
}

struct Population {
  std::vector<SimulatorSpec> members;
  std::vector<double> weights;

  void validate() const {
    if (members.empty()) throw Error(ErrorCode::Validation, "population is empty");
    if (weights.size() != members.size()) throw Error(ErrorCode::Validation, "weights and members differ in size");
    double sum = 0.0;
    for (double w : weights) {
      if (!(w >= 0.0)) throw Error(ErrorCode::Validation, "negative population weight");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw Error(ErrorCode::Validation, "population weights sum to " + std::to_string(sum));
  }

  std::map<PersonaCategory, std::size_t> persona_counts() const {
    std::map<PersonaCategory, std::size_t> out;
    for (const auto& m : members) ++out[m.persona.category];
    return out;
  }
};

/// Chooses the backend for the member with the given persona and id.
using MemberFactory = std::function<SimulatorBackend(const PersonaProfile&, const std::string& id)>;

/// Default profiles, varied per member by a hash of the member id.
inline MemberFactory default_scripted_members(TaskKind task, const Catalog& catalog) {
  return [task, &catalog](const PersonaProfile& persona, const std::string& id) -> SimulatorBackend {
    auto p = default_scripted_profile(task, persona.category, catalog, {}, fnv1a64(id));
    p.validate(catalog);
    return std::make_shared<const ScriptedProfile>(std::move(p));
  };
}

/// Balanced population: size / |categories| members per category, members
/// ordered category-major, weights proportional to category frequency.
inline Population build_population(TaskKind task, std::size_t size, const std::vector<PersonaCategory>& categories,
                                   const PersonaRenderer& renderer, const Catalog& catalog, const MemberFactory& factory,
                                   const std::string& id_prefix = "sim", std::size_t variant_offset = 0) {
  if (categories.empty()) throw Error(ErrorCode::Balance, "no persona categories given");
  if (size == 0 || size % categories.size() != 0) {
    throw Error(ErrorCode::Balance, "population size " + std::to_string(size) + " is not divisible by " +
                                        std::to_string(categories.size()) + " categories");
  }
  const std::size_t per = size / categories.size();
  Population pop;
  for (const auto& cat : categories) {
    for (std::size_t k = 0; k < per; ++k) {
      SimulatorSpec spec;
      spec.task = task;
      spec.persona = renderer.render(cat, variant_offset + k);
      spec.id = id_prefix + "-" + std::to_string(cat.index()) + "-" + std::to_string(variant_offset + k);
      spec.resisting_strategies = catalog.resisting_strategies(task);
      spec.backend = factory(spec.persona, spec.id);
      pop.members.push_back(std::move(spec));
    }
  }
  // Category c carries mass freq(c) / size, shared equally by its members,
  // which gives every member 1 / size.
  pop.weights.assign(pop.members.size(), 1.0 / static_cast<double>(size));
  return pop;
}

/// Draws member i with probability weights[i].
inline const SimulatorSpec& sample_simulator(const Population& population, Rng& rng) {
  return population.members[sample_index(population.weights, rng)];
}

inline std::size_t sample_simulator_index(const Population& population, Rng& rng) {
  return sample_index(population.weights, rng);
}

/// Ids must not overlap between training and evaluation populations.
inline void ensure_disjoint(const Population& a, const Population& b) {
  std::set<std::string> ids;
  for (const auto& m : a.members) ids.insert(m.id);
  for (const auto& m : b.members) {
    if (ids.contains(m.id)) throw Error(ErrorCode::Validation, "simulator " + m.id + " appears in both populations");
  }
}

/// Population with a single member carrying all the weight.
inline Population single_member_population(SimulatorSpec spec) {
  Population p;
  p.members.push_back(std::move(spec));
  p.weights.push_back(1.0);
  return p;
}

}  // namespace dialplan
