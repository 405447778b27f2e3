#pragma once

// Command-line front end. run_command() is the whole program minus signal
// wiring, so tests drive it in-process.

#include "dialplan/evaluation.hpp"
#include "dialplan/population_io.hpp"
#include "dialplan/remote_backend.hpp"
#include "dialplan/session.hpp"
#include "dialplan/synthetic.hpp"
#include "dialplan/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <ctime>
#include <iostream>
#include <thread>

namespace dialplan::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitInterrupted = 130;

struct Context {
  std::ostream* out = &std::cout;
  std::ostream* err = &std::cerr;
  const std::atomic<bool>* stop = nullptr;
  std::function<void(int)> on_listen;  // serve: called with the bound port
};

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::filesystem::path data_dir() { return std::filesystem::path(DIALPLAN_CATALOG_PATH).parent_path(); }

inline std::filesystem::path default_population(TaskKind task, std::string_view which) {
  return data_dir() / "populations" / (std::string(to_string(task)) + "-" + std::string(which) + ".json");
}

inline std::string utc_stamp(std::chrono::system_clock::time_point t, const char* fmt) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[64];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

inline std::string iso_now() { return utc_stamp(std::chrono::system_clock::now(), "%Y-%m-%dT%H:%M:%SZ"); }

// Keys accepted in --config files. Flags use the same names with '-' for '_'.
inline const std::map<std::string, nlohmann::json>& config_defaults() {
  static const std::map<std::string, nlohmann::json> kDefaults{
      {"task", "cb"},
      {"seed", 0},
      {"episodes", 1000},
      {"lr", nullptr},  // per command: train 1e-6, sft 6e-6
      {"gamma", 0.999},
      {"max_turns", 10},
      {"population", nullptr},
      {"eval_population", nullptr},
      {"checkpoint", nullptr},
      {"corpus", nullptr},
      {"archive", nullptr},
      {"output", nullptr},
      {"tom", "on"},
      {"backend", "scripted"},
      {"model", "gpt-3.5-turbo"},
      {"repeats", 1},
      {"threads", 1},
      {"serve_port", 8080},
      {"host", "127.0.0.1"},
      {"idle_minutes", 30.0},
      {"max_sessions", 64},
      {"checkpoint_every", 100},
      {"sft_init", "on"},
      {"sft_lr", 6e-6},
      {"epochs", 10},
      {"batch_size", 16},
      {"weight_decay", 0.01},
      {"validation_fraction", 0.0},
      {"judge_samples", 10},
      {"stack_turn_penalty", false},
      {"use_baseline", false},
      {"baseline", 0.0},
      {"personas", 8},
      {"examples", 200},
      {"size", 40},
      {"prefix", "sim"},
      {"variant_offset", 0},
      {"runs_dir", "runs"},
  };
  return kDefaults;
}

/// Resolved settings: defaults < config file < flags.
class Settings {
 public:
  nlohmann::json values = nlohmann::json::object();

  bool has(const std::string& k) const { return values.contains(k) && !values.at(k).is_null(); }

  template <typename T>
  T get(const std::string& k) const {
    if (!has(k)) throw UsageError("missing setting '" + k + "'");
    try {
      return values.at(k).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw UsageError("setting '" + k + "' has the wrong type: " + values.at(k).dump());
    }
  }

  std::optional<std::string> path(const std::string& k) const {
    return has(k) ? std::optional<std::string>(get<std::string>(k)) : std::nullopt;
  }

  bool on(const std::string& k) const {
    const auto& v = values.at(k);
    if (v.is_boolean()) return v.get<bool>();
    const auto s = to_lower(v.get<std::string>());
    if (s == "on" || s == "true") return true;
    if (s == "off" || s == "false") return false;
    throw UsageError("setting '" + k + "' must be on or off");
  }

  TaskKind task() const {
    try {
      return parse_task(get<std::string>("task"));
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }
};

inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  nlohmann::json doc;
  try {
    doc = read_json_file(path);
  } catch (const Error& e) {
    throw UsageError(std::string("--config: ") + e.what());
  }
  if (!doc.is_object()) throw UsageError("--config: top level must be an object");
  for (const auto& [k, _] : doc.items()) {
    if (!config_defaults().count(k)) throw UsageError("--config: unknown key '" + k + "'");
  }
  return doc;
}

// ---------------------------------------------------------------------------
// Run directories

class RunDir {
 public:
  RunDir(const Settings& s, const std::string& command, const std::string& subcommand, const Catalog& catalog)
      : started_(iso_now()) {
    const nlohmann::json hashed{{"command", subcommand}, {"config", s.values}};
    config_hash_ = sha256_hex(hashed.dump());
    const std::filesystem::path root = s.get<std::string>("runs_dir");
    const auto base = utc_stamp(std::chrono::system_clock::now(), "%Y%m%dT%H%M%SZ") + "-" + config_hash_.substr(0, 8);
    dir_ = root / base;
    for (int n = 2; std::filesystem::exists(dir_); ++n) dir_ = root / (base + "-" + std::to_string(n));
    std::filesystem::create_directories(dir_);
    manifest_ = {{"command", command},
                 {"subcommand", subcommand},
                 {"config", s.values},
                 {"config_hash", config_hash_},
                 {"catalog_sha256", catalog.sha256()},
                 {"catalog_version", catalog.version()},
                 {"seed", s.values.value("seed", nlohmann::json(0))},
                 {"started_at", started_},
                 {"finished_at", nullptr},
                 {"status", "running"},
                 {"outputs", nlohmann::json::array()}};
    flush();
  }

  const std::filesystem::path& path() const { return dir_; }

  std::filesystem::path output(const std::string& name) {
    auto& outs = manifest_["outputs"];
    if (std::find(outs.begin(), outs.end(), name) == outs.end()) outs.push_back(name);
    return dir_ / name;
  }

  void note(const std::string& key, nlohmann::json value) { manifest_[key] = std::move(value); }

  void finish(const std::string& status) {
    manifest_["status"] = status;
    manifest_["finished_at"] = iso_now();
    flush();
  }

  void flush() const { write_json_file(dir_ / "manifest.json", manifest_); }

 private:
  std::string started_;
  std::string config_hash_;
  std::filesystem::path dir_;
  nlohmann::json manifest_;
};

// ---------------------------------------------------------------------------
// Shared wiring

inline BackendPtr remote_backend(const Settings& s) {
  if (s.get<std::string>("backend") != "remote") return nullptr;
  return std::make_shared<RemoteChatBackend>(RemoteBackendConfig::from_env(s.get<std::string>("model")));
}

inline EpisodeEnv make_env(TaskKind task, const Catalog& catalog, const Settings& s, const BackendPtr& remote) {
  const bool tom = s.on("tom");
  auto env = scripted_env(task, catalog, tom);
  env.max_turns = s.get<int>("max_turns");
  env.gamma = s.get<double>("gamma");
  env.goals.config.samples = s.get<int>("judge_samples");
  env.reward.stack_turn_penalty = s.get<bool>("stack_turn_penalty");
  if (remote) {
    env.tom = tom ? TomEngine::backed(remote, catalog) : TomEngine::off();
    env.responder = std::make_shared<LlmResponder>(remote, catalog);
    env.goals.judge = remote;
  }
  return env;
}

inline Population load_population(const std::filesystem::path& path, TaskKind task, const Catalog& catalog,
                                  const BackendPtr& remote) {
  ManifestOptions opt;
  opt.llm_backend = remote;
  TaskKind found{};
  auto pop = load_manifest(path, catalog, &found, opt);
  if (found != task) {
    throw Error(ErrorCode::Validation, "population " + path.string() + " is for task " + std::string(to_string(found)));
  }
  return pop;
}

inline PolicyParameters sft_from_corpus(const std::filesystem::path& corpus_path, TaskKind task, const EpisodeEnv& env,
                                        const Catalog& catalog, double lr, const Settings& s, SftReport* report) {
  auto corpus = read_corpus(corpus_path);
  std::erase_if(corpus, [&](const AnnotatedDialogue& d) { return d.task != task; });
  if (corpus.empty()) throw Error(ErrorCode::Validation, "corpus has no dialogues for task " + std::string(to_string(task)));
  auto examples = sft_examples(corpus, *env.encoder, env.tom, catalog);
  SftConfig cfg;
  cfg.lr = lr;
  cfg.batch_size = static_cast<std::size_t>(s.get<int>("batch_size"));
  cfg.epochs = s.get<int>("epochs");
  cfg.seed = s.get<std::uint64_t>("seed");
  cfg.validation_fraction = s.get<double>("validation_fraction");
  cfg.adamw.weight_decay = s.get<double>("weight_decay");
  auto rep = sft_train(PolicyParameters::zeros(task, catalog.strategy_count(task), env.encoder->dim(), env.encoder->layout_hash()), std::move(examples), cfg);
  auto params = rep.params;
  if (report) *report = std::move(rep);
  return params;
}

inline std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "episode,success_rate,average_turns,mean_sl_ratio\n";
  for (const auto& c : curve) {
    out += std::to_string(c.episode) + "," + format_double(c.report.overall.success_rate) + "," +
           format_double(c.report.overall.average_turns) + "," + format_double(c.report.overall.mean_sl_ratio) + "\n";
  }
  return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

// ---------------------------------------------------------------------------
// Subcommands

inline int cmd_sft(const Settings& s, RunDir& run, const Catalog& catalog, Context& ctx) {
  const auto task = s.task();
  const auto corpus = s.path("corpus");
  if (!corpus) throw UsageError("sft needs --corpus");
  const auto remote = remote_backend(s);
  const auto env = make_env(task, catalog, s, remote);
  const double lr = s.has("lr") ? s.get<double>("lr") : s.get<double>("sft_lr");
  SftReport rep;
  const auto params = sft_from_corpus(*corpus, task, env, catalog, lr, s, &rep);
  save_checkpoint(run.output("policy.json"), params, env.encoder->layout_description());
  std::string csv = "epoch,train_loss,validation_loss\n";
  for (std::size_t e = 0; e < rep.epoch_loss.size(); ++e) {
    csv += std::to_string(e + 1) + "," + format_double(rep.epoch_loss[e]) + "," +
           (e < rep.validation_loss.size() ? format_double(rep.validation_loss[e]) : "") + "\n";
  }
  write_text(run.output("sft_loss.csv"), csv);
  run.note("sft", {{"initial_loss", rep.initial_loss},
                   {"final_loss", rep.epoch_loss.empty() ? rep.initial_loss : rep.epoch_loss.back()},
                   {"best_epoch", rep.best_epoch}});
  *ctx.out << "sft: initial loss " << rep.initial_loss << ", final loss "
           << (rep.epoch_loss.empty() ? rep.initial_loss : rep.epoch_loss.back()) << "\n";
  return kExitOk;
}

inline int cmd_train(const Settings& s, RunDir& run, const Catalog& catalog, Context& ctx) {
  const auto task = s.task();
  const auto remote = remote_backend(s);
  auto env = make_env(task, catalog, s, remote);
  const auto pop_path = s.path("population").value_or(default_population(task, "train40").string());
  const auto pop = load_population(pop_path, task, catalog, remote);
  std::optional<Population> eval_pop;
  if (const auto p = s.path("eval_population")) eval_pop = load_population(*p, task, catalog, remote);

  PolicyParameters params;
  std::string init;
  if (const auto ck = s.path("checkpoint")) {
    params = load_checkpoint(*ck, env.encoder->layout_hash());
    init = "checkpoint";
  } else if (s.on("sft_init") && s.has("corpus")) {
    params = sft_from_corpus(*s.path("corpus"), task, env, catalog, s.get<double>("sft_lr"), s, nullptr);
    init = "sft";
  } else {
    params = PolicyParameters::zeros(task, catalog.strategy_count(task), env.encoder->dim(), env.encoder->layout_hash());
    init = "zeros";
  }
  if (params.task != task) throw Error(ErrorCode::Validation, "initial checkpoint was trained for another task");
  run.note("init", init);

  TrainConfig cfg;
  cfg.episodes = s.get<int>("episodes");
  cfg.lr = s.has("lr") ? s.get<double>("lr") : 1e-6;
  cfg.gamma = s.get<double>("gamma");
  cfg.max_turns = s.get<int>("max_turns");
  cfg.population = &pop;
  cfg.eval_population = eval_pop ? &*eval_pop : nullptr;
  cfg.tom_enabled = s.on("tom");
  cfg.seed = s.get<std::uint64_t>("seed");
  cfg.checkpoint_every = s.get<int>("checkpoint_every");
  cfg.use_baseline = s.get<bool>("use_baseline");
  cfg.baseline = s.get<double>("baseline");
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  run.note("train_config", cfg.to_json());
  run.flush();

  const auto layout = env.encoder->layout_description();
  std::filesystem::create_directories(run.path() / "checkpoints");
  std::vector<CurvePoint> curve;
  std::ofstream archive(run.output("train_archive.jsonl"), std::ios::binary);
  TrainHooks hooks;
  hooks.stop = ctx.stop;
  hooks.on_checkpoint = [&](const CurvePoint& cp, const PolicyParameters& p) {
    save_checkpoint(run.path() / "checkpoints" / ("ckpt-" + std::to_string(cp.episode) + ".json"), p, layout);
    curve.push_back(cp);
    write_text(run.output("curve.csv"), curve_csv(curve));
  };
  hooks.on_episode = [&](const EpisodeRecord& r) { archive << archive_line(r) << '\n'; };
  run.output("checkpoints/");

  const auto result = train(std::move(params), default_scenarios(task), env, cfg, hooks);
  archive.close();
  save_checkpoint(run.output("policy.json"), result.params, layout);
  write_text(run.output("curve.csv"), curve_csv(result.curve));
  nlohmann::json curve_json = nlohmann::json::array();
  for (const auto& c : result.curve) curve_json.push_back({{"episode", c.episode}, {"report", to_json(c.report)}});
  write_json_file(run.output("curve.json"), curve_json);
  run.note("result", {{"episodes", static_cast<int>(result.episodes.size())},
                      {"updates", result.updates},
                      {"invalid_episodes", result.invalid_episodes},
                      {"divergences", result.divergences},
                      {"stopped", result.stopped}});
  if (!result.curve.empty()) {
    const auto& last = result.curve.back().report.overall;
    *ctx.out << "train: " << result.episodes.size() << " episodes, SR " << last.success_rate << ", AT "
             << last.average_turns << "\n";
  }
  if (result.stopped) {
    *ctx.err << "interrupted; checkpoint written to " << (run.path() / "policy.json").string() << "\n";
    return kExitInterrupted;
  }
  return kExitOk;
}

inline int cmd_eval(const Settings& s, RunDir& run, const Catalog& catalog, Context& ctx) {
  const auto task = s.task();
  const auto ck = s.path("checkpoint");
  if (!ck) throw UsageError("eval needs --checkpoint");
  const auto remote = remote_backend(s);
  const auto env = make_env(task, catalog, s, remote);
  const auto params = load_checkpoint(*ck, env.encoder->layout_hash());
  if (params.task != task) throw Error(ErrorCode::Validation, "checkpoint was trained for another task");
  const auto pop = load_population(s.path("population").value_or(default_population(task, "eval300").string()), task,
                                   catalog, remote);
  EvalConfig cfg;
  cfg.seed = s.get<std::uint64_t>("seed");
  cfg.repeats = s.get<int>("repeats");
  cfg.threads = static_cast<unsigned>(std::max(1, s.get<int>("threads")));
  if (cfg.repeats < 1) throw UsageError("--repeats must be >= 1");
  const auto result = evaluate(params, pop, default_scenarios(task), env, cfg);
  write_archive(run.output("archive.jsonl"), result.archive);
  run.output("summary.json");
  run.output("per_persona.csv");
  run.output("plot_data.csv");
  write_report(run.path(), result.report);
  const auto& o = result.report.overall;
  *ctx.out << "eval: " << result.report.episode_count << " episodes, SR " << o.success_rate << ", AT "
           << o.average_turns;
  if (task == TaskKind::PriceNegotiation) *ctx.out << ", SL% " << o.mean_sl_ratio;
  *ctx.out << "\n";
  return kExitOk;
}

inline int cmd_analyze(const Settings& s, RunDir& run, const Catalog& catalog, Context& ctx) {
  const auto path = s.path("archive");
  if (!path) throw UsageError("analyze needs --archive");
  const auto archive = read_archive(*path);
  if (archive.empty()) throw Error(ErrorCode::Validation, "archive is empty");
  const auto task = archive.front().task;
  const auto report = strategy_sequence_distances(archive, histogram_bigram_encoder(task, catalog));
  const auto j = to_json(report);
  write_json_file(run.output("distances.json"), j);
  *ctx.out << j.dump(2) << "\n";
  return kExitOk;
}

inline int cmd_serve(const Settings& s, RunDir& run, const Catalog& catalog, Context& ctx) {
  const auto ck = s.path("checkpoint");
  if (!ck) throw UsageError("serve needs --checkpoint (a checkpoint file or a directory of them)");
  const auto remote = remote_backend(s);
  std::shared_ptr<CheckpointStore> store;
  if (std::filesystem::is_directory(*ck)) {
    store = std::make_shared<CheckpointStore>(*ck);
  } else {
    store = std::make_shared<CheckpointStore>();
    store->add(std::filesystem::path(*ck).stem().string(), load_checkpoint(*ck, std::nullopt));
  }
  SessionConfig cfg;
  cfg.catalog = &catalog;
  for (auto task : kAllTasks) {
    auto env = make_env(task, catalog, s, remote);
    env.goals.donation_by_judge = true;
    cfg.envs.emplace(task, std::move(env));
    for (auto& sc : default_scenarios(task)) cfg.scenarios.emplace(sc.id, sc);
  }
  cfg.archive_path = run.output("sessions.jsonl");
  cfg.idle_timeout = std::chrono::milliseconds(static_cast<long long>(s.get<double>("idle_minutes") * 60000.0));
  cfg.max_active = static_cast<std::size_t>(s.get<int>("max_sessions"));
  auto manager = std::make_shared<SessionManager>(std::move(cfg), store);
  SessionServer server(manager);
  const int port = server.bind(s.get<std::string>("host"), s.get<int>("serve_port"));
  run.note("port", port);
  run.flush();
  *ctx.out << "serving on http://" << s.get<std::string>("host") << ":" << port << std::endl;
  std::thread worker([&] { server.listen_after_bind(); });
  while (!server.running()) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  if (ctx.on_listen) ctx.on_listen(port);
  while (!(ctx.stop && ctx.stop->load())) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    manager->expire_idle();
  }
  server.stop();
  worker.join();
  // Ongoing sessions end as incomplete on shutdown.
  manager->expire_idle(SessionManager::Clock::time_point::max());
  return kExitOk;
}

inline int cmd_personas(Context& ctx) {
  *ctx.out << persona_list_json().dump(2) << "\n";
  return kExitOk;
}

inline int cmd_population(const Settings& s, const Catalog& catalog, Context& ctx) {
  const auto task = s.task();
  const auto output = s.path("output");
  if (!output) throw UsageError("population needs --output");
  const auto size = static_cast<std::size_t>(s.get<int>("size"));
  const auto pop = build_population(task, size, enumerate_personas(), TemplatePersonaRenderer(), catalog,
                                    default_scripted_members(task, catalog), s.get<std::string>("prefix"),
                                    static_cast<std::size_t>(s.get<int>("variant_offset")));
  write_manifest(*output, pop, task, catalog);
  *ctx.out << "population: " << pop.members.size() << " members written to " << *output << "\n";
  return kExitOk;
}

inline int cmd_corpus(const Settings& s, const Catalog& catalog, Context& ctx) {
  const auto task = s.task();
  const auto output = s.path("output");
  if (!output) throw UsageError("corpus needs --output");
  const auto env = make_synthetic_environment(catalog, static_cast<std::size_t>(s.get<int>("personas")), task, 0.9, 0.2,
                                              s.get<int>("max_turns"));
  CorpusConfig cfg;
  cfg.examples = static_cast<std::size_t>(s.get<int>("examples"));
  cfg.seed = s.get<std::uint64_t>("seed");
  const auto corpus = generate_corpus(env, catalog, cfg);
  write_corpus(*output, corpus);
  *ctx.out << "corpus: " << corpus.size() << " dialogues, " << cfg.examples << " annotated turns written to " << *output
           << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Entry point

inline void log_error(std::ostream& err, std::string_view code, const std::string& message) {
  err << nlohmann::json{{"level", "error"}, {"code", std::string(code)}, {"message", message}}.dump() << "\n";
}

inline int run_command(const std::vector<std::string>& args, Context ctx = {}) {
  CLI::App app{"Persona-aware dialogue strategy planning: supervised init, population RL, evaluation and live sessions",
               "dialplan"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");

  struct Flags {
    std::string task, config, population, eval_population, checkpoint, tom, backend, corpus, archive, output, runs_dir,
        prefix, host, model, sft_init;
    long long seed = 0;
    int episodes = 0, repeats = 0, serve_port = 0, threads = 0, epochs = 0, batch_size = 0, checkpoint_every = 0,
        personas = 0, examples = 0, size = 0, variant_offset = 0, max_turns = 0, max_sessions = 0, judge_samples = 0;
    double lr = 0, gamma = 0, sft_lr = 0, idle_minutes = 0, weight_decay = 0, validation_fraction = 0;
  } f;
  struct Binding {
    CLI::Option* opt;
    std::string key;
    std::function<nlohmann::json()> value;
  };
  std::map<CLI::App*, std::vector<Binding>> bindings;

  auto add = [&](CLI::App* sub, const std::string& flag, auto& var, const std::string& help) {
    auto* opt = sub->add_option(flag, var, help);
    std::string key = flag.substr(2);
    std::replace(key.begin(), key.end(), '-', '_');
    bindings[sub].push_back({opt, key, [&var] { return nlohmann::json(var); }});
    return opt;
  };
  auto common = [&](CLI::App* sub) {
    add(sub, "--task", f.task, "cb (price negotiation) or p4g (charity persuasion)")
        ->check(CLI::IsMember({"cb", "p4g"}));
    add(sub, "--seed", f.seed, "Base seed");
    add(sub, "--tom", f.tom, "Mental-state inference on|off")->check(CLI::IsMember({"on", "off"}));
    add(sub, "--backend", f.backend, "scripted or remote (LLM_API_BASE, LLM_API_KEY)")
        ->check(CLI::IsMember({"scripted", "remote"}));
    add(sub, "--model", f.model, "Model name for the remote backend");
    add(sub, "--max-turns", f.max_turns, "Turn budget")->check(CLI::PositiveNumber);
    add(sub, "--judge-samples", f.judge_samples, "Judge votes per goal check")->check(CLI::PositiveNumber);
    add(sub, "--runs-dir", f.runs_dir, "Parent of run directories (default runs)");
    sub->add_option("--config", f.config, "JSON config file; flags override it")->check(CLI::ExistingFile);
  };

  auto* sft = app.add_subcommand("sft", "Supervised policy init from an annotated corpus");
  common(sft);
  add(sft, "--corpus", f.corpus, "Annotated corpus (JSONL)");
  add(sft, "--lr", f.lr, "Learning rate (default 6e-6)")->check(CLI::PositiveNumber);
  add(sft, "--epochs", f.epochs, "Epochs")->check(CLI::PositiveNumber);
  add(sft, "--batch-size", f.batch_size, "Batch size")->check(CLI::PositiveNumber);
  add(sft, "--weight-decay", f.weight_decay, "AdamW weight decay");
  add(sft, "--validation-fraction", f.validation_fraction, "Held-out share for model selection");

  auto* tr = app.add_subcommand("train", "Population REINFORCE training");
  common(tr);
  add(tr, "--episodes", f.episodes, "Training episodes")->check(CLI::PositiveNumber);
  add(tr, "--lr", f.lr, "Learning rate (default 1e-6)")->check(CLI::PositiveNumber);
  add(tr, "--gamma", f.gamma, "Discount factor in (0, 1]");
  add(tr, "--population", f.population, "Training population manifest");
  add(tr, "--eval-population", f.eval_population, "Population for curve checkpoints");
  add(tr, "--checkpoint", f.checkpoint, "Initial policy");
  add(tr, "--corpus", f.corpus, "Corpus for supervised init when no checkpoint is given");
  add(tr, "--sft-init", f.sft_init, "Supervised init from --corpus on|off")->check(CLI::IsMember({"on", "off"}));
  add(tr, "--sft-lr", f.sft_lr, "Learning rate of the supervised init");
  add(tr, "--checkpoint-every", f.checkpoint_every, "Episodes between curve checkpoints (0 = end only)");

  auto* ev = app.add_subcommand("eval", "Greedy evaluation over a population");
  common(ev);
  add(ev, "--population", f.population, "Evaluation population manifest");
  add(ev, "--checkpoint", f.checkpoint, "Policy checkpoint");
  add(ev, "--repeats", f.repeats, "Episodes per simulator and scenario")->check(CLI::PositiveNumber);
  add(ev, "--threads", f.threads, "Rollout threads")->check(CLI::PositiveNumber);

  auto* an = app.add_subcommand("analyze", "Strategy-sequence distances of an archive");
  common(an);
  add(an, "--archive", f.archive, "Episode archive (JSONL)");

  auto* sv = app.add_subcommand("serve", "HTTP session service for live dialogues");
  common(sv);
  add(sv, "--checkpoint", f.checkpoint, "Checkpoint file or directory of <id>.json checkpoints");
  add(sv, "--serve-port", f.serve_port, "Port (0 picks a free one)");
  add(sv, "--host", f.host, "Bind address");
  add(sv, "--idle-minutes", f.idle_minutes, "Idle expiry");
  add(sv, "--max-sessions", f.max_sessions, "Concurrent session cap")->check(CLI::PositiveNumber);

  auto* pe = app.add_subcommand("personas", "List the persona categories");

  auto* po = app.add_subcommand("population", "Write a scripted population manifest");
  common(po);
  add(po, "--size", f.size, "Members (multiple of 20)")->check(CLI::PositiveNumber);
  add(po, "--prefix", f.prefix, "Member id prefix");
  add(po, "--variant-offset", f.variant_offset, "Persona description variant offset");
  add(po, "--output", f.output, "Manifest path");

  auto* co = app.add_subcommand("corpus", "Generate a synthetic annotated corpus");
  common(co);
  add(co, "--personas", f.personas, "Distinct synthetic personas");
  add(co, "--examples", f.examples, "Annotated agent turns")->check(CLI::PositiveNumber);
  add(co, "--output", f.output, "Corpus path (JSONL)");

  std::vector<const char*> argv{"dialplan"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    *ctx.out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    *ctx.out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    *ctx.err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    *ctx.err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  std::string command = "dialplan";
  for (const auto& a : args) command += " " + a;

  try {
    const auto& catalog = Catalog::bundled();
    if (sub == pe) return cmd_personas(ctx);

    Settings s;
    for (const auto& [k, v] : config_defaults()) s.values[k] = v;
    if (!f.config.empty()) {
      const auto doc = load_config_file(f.config);
      for (const auto& [k, v] : doc.items()) s.values[k] = v;
    }
    for (const auto& b : bindings[sub]) {
      if (b.opt->count() > 0) s.values[b.key] = b.value();
    }
    s.task();

    if (sub == po) return cmd_population(s, catalog, ctx);
    if (sub == co) return cmd_corpus(s, catalog, ctx);

    RunDir run(s, command, sub->get_name(), catalog);
    *ctx.err << "run directory: " << run.path().string() << "\n";
    int code = kExitRuntime;
    try {
      if (sub == sft) code = cmd_sft(s, run, catalog, ctx);
      if (sub == tr) code = cmd_train(s, run, catalog, ctx);
      if (sub == ev) code = cmd_eval(s, run, catalog, ctx);
      if (sub == an) code = cmd_analyze(s, run, catalog, ctx);
      if (sub == sv) code = cmd_serve(s, run, catalog, ctx);
    } catch (...) {
      run.finish("failed");
      throw;
    }
    run.finish(code == kExitOk ? "ok" : code == kExitInterrupted ? "interrupted" : "failed");
    return code;
  } catch (const UsageError& e) {
    *ctx.err << "error: " << e.what() << "\n\n" << sub->help();
    return kExitUsage;
  } catch (const Error& e) {
    log_error(*ctx.err, to_string(e.code()), e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    log_error(*ctx.err, "internal", e.what());
    return kExitRuntime;
  }
}

}  // namespace dialplan::cli
