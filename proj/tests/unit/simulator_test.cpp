#include "dialplan/population_io.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace dialplan;

namespace {

const Catalog& cat() { return Catalog::bundled(); }

PersonaCategory persona(std::size_t i) { return PersonaCategory::from_index(i); }

/// Runs `turns` scripted rounds with a constant strategy; true on conversion.
bool play(const ScriptedProfile& p, const Scenario& sc, const std::string& strategy, int turns, Rng& rng) {
  auto state = DialogueState::start(sc, turns);
  ScriptedUserState user;
  for (int t = 0; t < turns; ++t) {
    state = advance(state, {Speaker::Agent, "pitch", strategy, std::nullopt, 0});
    auto reply = scripted_response(p, user, state, strategy, rng, cat());
    state = advance(state, reply);
    if (user.converted) return true;
  }
  return false;
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("dialplan-sim-" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace

TEST(ScriptedProfile, DefaultProfilesValidate) {
  for (auto task : kAllTasks) {
    for (const auto& c : enumerate_personas()) {
      const auto p = default_scripted_profile(task, c, cat());
      EXPECT_NO_THROW(p.validate(cat()));
      ASSERT_TRUE(p.best_response(cat()).has_value());
      EXPECT_EQ(*p.best_response(cat()), (c.index() * 3) % cat().strategy_count(task));
    }
  }
}

TEST(ScriptedProfile, ValidationRejectsBadProfiles) {
  auto p = default_scripted_profile(TaskKind::PriceNegotiation, persona(0), cat());
  auto bad = p;
  bad.susceptibility["Greetings"] = 1.5;
  EXPECT_THROW(bad.validate(cat()), Error);
  bad = p;
  bad.response_table.erase({"Greetings", Phase::Late});
  EXPECT_THROW(bad.validate(cat()), Error);
  bad = p;
  bad.response_table[{"Greetings", Phase::Early}].resisting = "Shouting";
  EXPECT_THROW(bad.validate(cat()), Error);
  bad = p;
  bad.susceptibility["Logical Appeal"] = 0.5;
  EXPECT_THROW(bad.validate(cat()), Error);
  bad = p;
  bad.threshold = 0;
  EXPECT_THROW(bad.validate(cat()), Error);
}

TEST(ScriptedProfile, BestResponseReportsTies) {
  auto p = make_synthetic_profile(TaskKind::CharityPersuasion, persona(3), 4, "Hesitance", cat());
  EXPECT_EQ(p.best_response(cat()), std::optional<std::size_t>(4));
  for (auto& [name, v] : p.susceptibility) v = 0.1;
  EXPECT_FALSE(p.best_response(cat()).has_value());
}

TEST(ScriptedProfile, PhaseSplitChoosesRule) {
  const auto p = default_scripted_profile(TaskKind::CharityPersuasion, persona(7), cat());
  EXPECT_EQ(p.phase_at(1), Phase::Early);
  EXPECT_EQ(p.phase_at(5), Phase::Early);
  EXPECT_EQ(p.phase_at(6), Phase::Late);
  EXPECT_NE(p.rule("Logical Appeal", Phase::Early).resisting, p.rule("Logical Appeal", Phase::Late).resisting);
  EXPECT_THROW(p.rule("Nonexistent", Phase::Early), Error);
}

TEST(ScriptedProfile, SyntheticProfileHitsTargetRates) {
  const auto p = make_synthetic_profile(TaskKind::PriceNegotiation, persona(0), 2, "Counter Argument", cat(), 0.9, 0.2, 10);
  auto constant = [&](std::size_t a) {
    std::vector<double> d(cat().strategy_count(p.task), 0.0);
    d[a] = 1.0;
    return success_probability(p, 10, cat(), [d](int) { return d; });
  };
  EXPECT_NEAR(constant(2), 0.9, 1e-12);
  EXPECT_NEAR(constant(0), 0.2, 1e-12);
  const auto best = brute_force_optimum(p, 10, cat());
  EXPECT_EQ(best.strategy, 2u);
  EXPECT_NEAR(best.success, 0.9, 1e-12);
}

TEST(ScriptedProfile, ExactSuccessMatchesMonteCarlo) {
  const auto p = default_scripted_profile(TaskKind::PriceNegotiation, persona(5), cat());
  const auto& strategy = cat().strategy(p.task, *p.best_response(cat())).name;
  const std::size_t a = *p.best_response(cat());
  std::vector<double> onehot(cat().strategy_count(p.task), 0.0);
  onehot[a] = 1.0;
  const double exact = success_probability(p, 10, cat(), [&](int) { return onehot; });
  Rng rng(42);
  const int n = 20000;
  int wins = 0;
  for (int i = 0; i < n; ++i) wins += play(p, road_bike_scenario(), strategy, 10, rng);
  const double freq = static_cast<double>(wins) / n;
  const double se = std::sqrt(exact * (1 - exact) / n);
  EXPECT_NEAR(freq, exact, 4 * se);
}

TEST(ScriptedProfile, BruteForceMatchesExhaustiveSearch) {
  const auto p = default_scripted_profile(TaskKind::CharityPersuasion, persona(11), cat());
  const auto best = brute_force_optimum(p, 10, cat());
  const auto k = cat().strategy_count(p.task);
  for (std::size_t a = 0; a < k; ++a) {
    std::vector<double> d(k, 0.0);
    d[a] = 1.0;
    EXPECT_LE(success_probability(p, 10, cat(), [d](int) { return d; }), best.success + 1e-15);
  }
  EXPECT_EQ(best.strategy, *p.best_response(cat()));
}

TEST(ScriptedProfile, ScaledDynamicsIsDeterministic) {
  auto p = default_scripted_profile(TaskKind::PriceNegotiation, persona(0), cat());
  p.dynamics = PropensityDynamics::Scaled;
  for (auto& [k, r] : p.response_table) r.delta = 1.0;
  for (auto& [k, v] : p.susceptibility) v = 0.25;
  Rng rng(1);
  auto state = DialogueState::start(road_bike_scenario());
  ScriptedUserState user;
  for (int t = 1; t <= 4; ++t) {
    state = advance(state, {Speaker::Agent, "pitch", "Greetings", std::nullopt, 0});
    const auto u = scripted_response(p, user, state, "Greetings", rng, cat());
    EXPECT_EQ(user.converted, t == 4);
    EXPECT_EQ(u.resisting_strategy.has_value(), t < 4);
    state = advance(state, u);
  }
  // Convinced at turn 4: concession 0.8 - 3 * 0.05 of the 143 gap.
  EXPECT_EQ(scripted_deal_price(p, road_bike_scenario(), 4), Money::from_cents(28500 - 9295));
  EXPECT_NE(state.history.back().text.find(Money::from_cents(28500 - 9295).display()), std::string::npos);
}

TEST(ScriptedProfile, RefusesFinishedDialogue) {
  const auto p = default_scripted_profile(TaskKind::PriceNegotiation, persona(0), cat());
  auto state = DialogueState::start(road_bike_scenario());
  state = conclude(state, TerminationStatus::of(Outcome::FailureMaxTurns));
  ScriptedUserState user;
  Rng rng(0);
  EXPECT_THROW(scripted_response(p, user, state, "Greetings", rng, cat()), Error);
}

TEST(ScriptedProfile, JsonRoundTrip) {
  for (auto task : kAllTasks) {
    const auto p = default_scripted_profile(task, persona(13), cat(), "custom", 99);
    const auto back = scripted_profile_from_json(to_json(p));
    EXPECT_EQ(to_json(back), to_json(p));
    EXPECT_EQ(back.response_table, p.response_table);
    EXPECT_EQ(back.susceptibility, p.susceptibility);
  }
}

TEST(ScriptedProfile, AnyPhaseRuleFillsBoth) {
  auto j = to_json(make_synthetic_profile(TaskKind::PriceNegotiation, persona(0), 0, "Hesitance", cat()));
  j["rules"] = nlohmann::json::array();
  for (const auto& s : cat().agent_strategies(TaskKind::PriceNegotiation)) {
    j["rules"].push_back({{"strategy", s.name}, {"phase", "any"}, {"resisting", "Others"}, {"text", "hm"}, {"delta", 1.0}});
  }
  const auto p = scripted_profile_from_json(j);
  EXPECT_NO_THROW(p.validate(cat()));
  EXPECT_EQ(p.rule("Greetings", Phase::Late).resisting, "Others");
}

TEST(SimulatorPrompt, FillsSlotsAndFlipsRoles) {
  const auto spec = make_scripted_spec("s1", TemplatePersonaRenderer().render(persona(2)),
                                       default_scripted_profile(TaskKind::PriceNegotiation, persona(2), cat()), cat());
  std::vector<Utterance> history{{Speaker::Agent, "Hello", "Greetings", std::nullopt, 1},
                                 {Speaker::User, "Hi", std::nullopt, "Others", 1}};
  const auto req = build_simulator_prompt(spec, road_bike_scenario(), history, cat());
  EXPECT_NE(req.system_prompt.find(spec.persona.description), std::string::npos);
  EXPECT_NE(req.system_prompt.find("road bike"), std::string::npos);
  EXPECT_NE(req.system_prompt.find("Source Derogation"), std::string::npos);
  EXPECT_EQ(req.system_prompt.find('{'), std::string::npos);
  ASSERT_EQ(req.messages.size(), 2u);
  EXPECT_EQ(req.messages[0].role, "user");
  EXPECT_EQ(req.messages[1].role, "assistant");
  EXPECT_NO_THROW(req.validate());
  EXPECT_THROW(build_simulator_prompt(spec, save_the_children_scenario(), {}, cat()), Error);
  auto empty = spec;
  empty.persona.description.clear();
  EXPECT_THROW(build_simulator_prompt(empty, road_bike_scenario(), {}, cat()), Error);
}

TEST(LlmSimulator, ParsesStrategyLeadIn) {
  auto backend = std::make_shared<CallbackBackend>("cb", [](const CompletionRequest& r, int) -> std::string {
    if (!r.messages.empty() && r.messages.back().content.ends_with("Did you agree?")) return "No";
    return "[Counter Argument] That price is too low.";
  });
  SimulatorSpec spec;
  spec.id = "llm-0";
  spec.task = TaskKind::PriceNegotiation;
  spec.persona = TemplatePersonaRenderer().render(persona(0));
  spec.backend = LlmBacked{backend};
  auto sim = instantiate(spec, cat());
  auto state = DialogueState::start(road_bike_scenario());
  state = advance(state, {Speaker::Agent, "Offer $150", "Propose the first price", std::nullopt, 0});
  Rng rng(0);
  const auto u = sim->respond(state, "Propose the first price", rng);
  EXPECT_EQ(u.speaker, Speaker::User);
  EXPECT_EQ(u.resisting_strategy, std::optional<std::string>("Counter Argument"));
  EXPECT_EQ(u.text, "That price is too low.");
  EXPECT_EQ(sim->answer(state, "Did you agree?", 3), (std::vector<std::string>{"No", "No", "No"}));

  spec.backend = LlmBacked{nullptr};
  EXPECT_THROW(instantiate(spec, cat())->respond(state, "", rng), Error);
}

TEST(ScriptedSimulator, AnswersFromConversionState) {
  auto p = make_synthetic_profile(TaskKind::CharityPersuasion, persona(0), 0, "Hesitance", cat(), 1.0, 1.0, 10);
  const auto spec = make_scripted_spec("s", TemplatePersonaRenderer().render(persona(0)), p, cat());
  auto sim = instantiate(spec, cat());
  auto state = DialogueState::start(save_the_children_scenario());
  EXPECT_EQ(sim->answer(state, "q", 2), (std::vector<std::string>{"No", "No"}));
  state = advance(state, {Speaker::Agent, "Please give", "Logical Appeal", std::nullopt, 0});
  Rng rng(0);
  const auto u = sim->respond(state, "Logical Appeal", rng);
  EXPECT_EQ(u.text, cat().prompt("user_line.p4g_donate"));
  EXPECT_EQ(sim->answer(state, "q", 1), std::vector<std::string>{"Yes"});
}

TEST(Population, BalancedAcrossPersonas) {
  const auto personas = enumerate_personas();
  const auto pop = build_population(TaskKind::PriceNegotiation, 40, personas, TemplatePersonaRenderer(), cat(),
                                    default_scripted_members(TaskKind::PriceNegotiation, cat()), "train");
  EXPECT_NO_THROW(pop.validate());
  ASSERT_EQ(pop.members.size(), 40u);
  for (const auto& [c, n] : pop.persona_counts()) EXPECT_EQ(n, 2u) << c.label();
  EXPECT_EQ(pop.persona_counts().size(), 20u);
  for (double w : pop.weights) EXPECT_DOUBLE_EQ(w, 1.0 / 40);
  EXPECT_NE(pop.members[0].persona.description, pop.members[1].persona.description);
  EXPECT_THROW(build_population(TaskKind::PriceNegotiation, 30, personas, TemplatePersonaRenderer(), cat(),
                                default_scripted_members(TaskKind::PriceNegotiation, cat())),
               Error);
  EXPECT_THROW(build_population(TaskKind::PriceNegotiation, 0, personas, TemplatePersonaRenderer(), cat(),
                                default_scripted_members(TaskKind::PriceNegotiation, cat())),
               Error);
}

TEST(Population, DisjointnessAndValidation) {
  const auto personas = enumerate_personas();
  auto make = [&](const std::string& prefix, std::size_t offset) {
    return build_population(TaskKind::CharityPersuasion, 20, personas, TemplatePersonaRenderer(), cat(),
                            default_scripted_members(TaskKind::CharityPersuasion, cat()), prefix, offset);
  };
  EXPECT_NO_THROW(ensure_disjoint(make("train", 0), make("eval", 0)));
  EXPECT_NO_THROW(ensure_disjoint(make("x", 0), make("x", 1000)));
  EXPECT_THROW(ensure_disjoint(make("x", 0), make("x", 0)), Error);

  auto pop = make("train", 0);
  pop.weights[0] += 0.1;
  EXPECT_THROW(pop.validate(), Error);
  pop.weights.pop_back();
  EXPECT_THROW(pop.validate(), Error);
  EXPECT_THROW(Population{}.validate(), Error);
}

TEST(Population, SamplerFollowsWeights) {
  auto pop = build_population(TaskKind::PriceNegotiation, 20, enumerate_personas(), TemplatePersonaRenderer(), cat(),
                              default_scripted_members(TaskKind::PriceNegotiation, cat()));
  std::fill(pop.weights.begin(), pop.weights.end(), 0.0);
  pop.weights[7] = 1.0;
  Rng rng(3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sample_simulator_index(pop, rng), 7u);
  const auto single = single_member_population(pop.members[3]);
  EXPECT_EQ(&sample_simulator(single, rng), &single.members[0]);
}

TEST(PopulationIo, ManifestRoundTrip) {
  const auto dir = temp_dir("manifest");
  auto pop = build_population(TaskKind::PriceNegotiation, 20, enumerate_personas(), TemplatePersonaRenderer(), cat(),
                              default_scripted_members(TaskKind::PriceNegotiation, cat()), "m");
  auto custom = make_synthetic_profile(TaskKind::PriceNegotiation, pop.members[4].persona.category, 1, "Hesitance", cat());
  custom.id = "custom-4";
  pop.members[4].backend = std::make_shared<const ScriptedProfile>(custom);
  write_manifest(dir / "pop.json", pop, TaskKind::PriceNegotiation, cat());
  EXPECT_TRUE(std::filesystem::exists(dir / "pop.profiles.json"));

  TaskKind task{};
  const auto back = load_manifest(dir / "pop.json", cat(), &task);
  EXPECT_EQ(task, TaskKind::PriceNegotiation);
  ASSERT_EQ(back.members.size(), pop.members.size());
  for (std::size_t i = 0; i < pop.members.size(); ++i) {
    EXPECT_EQ(back.members[i].id, pop.members[i].id);
    EXPECT_EQ(back.members[i].persona.category, pop.members[i].persona.category);
    EXPECT_EQ(back.members[i].persona.description, pop.members[i].persona.description);
    EXPECT_EQ(to_json(back.members[i].profile()), to_json(pop.members[i].profile()));
  }
  EXPECT_EQ(back.weights, pop.weights);
}

TEST(PopulationIo, LlmMembersNeedBackendUnlessFallback) {
  const auto dir = temp_dir("llm");
  auto pop = build_population(TaskKind::CharityPersuasion, 20, enumerate_personas(), TemplatePersonaRenderer(), cat(),
                              default_scripted_members(TaskKind::CharityPersuasion, cat()), "l");
  pop.members[0].backend = LlmBacked{nullptr};
  write_manifest(dir / "pop.json", pop, TaskKind::CharityPersuasion, cat());
  EXPECT_TRUE(load_manifest(dir / "pop.json", cat()).members[0].scripted());
  ManifestOptions strict;
  strict.scripted_fallback = false;
  EXPECT_THROW(load_manifest(dir / "pop.json", cat(), nullptr, strict), Error);
  ManifestOptions llm;
  llm.llm_backend = std::make_shared<FixedReplyBackend>("ok");
  llm.all_llm = true;
  const auto all = load_manifest(dir / "pop.json", cat(), nullptr, llm);
  for (const auto& m : all.members) EXPECT_FALSE(m.scripted());
}

TEST(PopulationIo, RejectsBrokenManifests) {
  const auto dir = temp_dir("broken");
  EXPECT_THROW(load_manifest(dir / "missing.json", cat()), Error);
  write_json_file(dir / "v2.json", {{"schema_version", 2}, {"task", "cb"}, {"members", nlohmann::json::array()}});
  EXPECT_THROW(load_manifest(dir / "v2.json", cat()), Error);
  write_json_file(dir / "unknown.json", {{"schema_version", 1},
                                         {"task", "cb"},
                                         {"members", {{{"id", "a"}, {"persona_index", 0}, {"weight", 1.0}, {"profile", "nope"}}}}});
  EXPECT_THROW(load_manifest(dir / "unknown.json", cat()), Error);
  write_json_file(dir / "weights.json", {{"schema_version", 1},
                                         {"task", "cb"},
                                         {"members", {{{"id", "a"}, {"persona_index", 0}, {"weight", 0.5}}}}});
  EXPECT_THROW(load_manifest(dir / "weights.json", cat()), Error);
}

TEST(PopulationIo, BundledPopulationsLoad) {
  const auto dir = Catalog::default_path().parent_path() / "populations";
  for (const auto& [file, size] : std::vector<std::pair<std::string, std::size_t>>{
           {"cb-train40.json", 40}, {"cb-eval300.json", 300}, {"p4g-train40.json", 40}, {"p4g-eval300.json", 300}}) {
    const auto pop = load_manifest(dir / file, cat());
    EXPECT_EQ(pop.members.size(), size) << file;
    for (const auto& [c, n] : pop.persona_counts()) EXPECT_EQ(n, size / 20) << file;
  }
  EXPECT_NO_THROW(ensure_disjoint(load_manifest(dir / "cb-train40.json", cat()), load_manifest(dir / "cb-eval300.json", cat())));
}
