#pragma once

// Live human-vs-agent sessions and their HTTP+JSON front end.

#include "dialplan/episode.hpp"

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <json.hpp>

#include <chrono>
#include <map>
#include <mutex>
#include <random>
#include <shared_mutex>

namespace dialplan {

/// Read-only policies addressed by id: `<dir>/<id>.json`, or registered in
/// memory.
class CheckpointStore {
 public:
  explicit CheckpointStore(std::filesystem::path dir = {}) : dir_(std::move(dir)) {}

  void add(const std::string& id, PolicyParameters params) {
    std::lock_guard lock(mutex_);
    cache_[id] = std::make_shared<const PolicyParameters>(std::move(params));
  }

  std::shared_ptr<const PolicyParameters> get(const std::string& id, std::uint64_t layout_hash) {
    std::lock_guard lock(mutex_);
    if (auto it = cache_.find(id); it != cache_.end()) {
      if (it->second->layout_hash != layout_hash) throw Error(ErrorCode::Checkpoint, "checkpoint " + id + " has another layout");
      return it->second;
    }
    const bool safe = !id.empty() && std::all_of(id.begin(), id.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    }) && id.find("..") == std::string::npos;
    if (!safe || dir_.empty()) throw Error(ErrorCode::NotFound, "unknown checkpoint '" + id + "'");
    const auto path = dir_ / (id + ".json");
    if (!std::filesystem::exists(path)) throw Error(ErrorCode::NotFound, "unknown checkpoint '" + id + "'");
    auto p = std::make_shared<const PolicyParameters>(load_checkpoint(path, layout_hash));
    cache_[id] = p;
    return p;
  }

 private:
  std::filesystem::path dir_;
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const PolicyParameters>> cache_;
};

struct SessionConfig {
  const Catalog* catalog = nullptr;
  std::map<TaskKind, EpisodeEnv> envs;  // encoder, ToM, responder, judge per task
  std::map<std::string, Scenario> scenarios;
  std::filesystem::path archive_path;  // JSONL; empty disables persistence
  std::chrono::milliseconds idle_timeout = std::chrono::minutes(30);
  std::size_t max_active = 64;
};

inline SessionConfig default_session_config(const Catalog& catalog, bool tom_enabled = true) {
  SessionConfig cfg;
  cfg.catalog = &catalog;
  for (auto task : kAllTasks) {
    auto env = scripted_env(task, catalog, tom_enabled);
    env.goals.donation_by_judge = true;
    cfg.envs.emplace(task, std::move(env));
    for (auto& s : default_scenarios(task)) cfg.scenarios.emplace(s.id, s);
  }
  return cfg;
}

class SessionManager {
 public:
  using Clock = std::chrono::steady_clock;

  SessionManager(SessionConfig cfg, std::shared_ptr<CheckpointStore> store)
      : cfg_(std::move(cfg)), store_(std::move(store)), id_rng_(std::random_device{}()) {
    if (!cfg_.catalog) throw Error(ErrorCode::Contract, "session manager needs a catalog");
  }

  /// Starts a session; the agent speaks first.
  nlohmann::json create(TaskKind task, const std::string& scenario_id, const std::string& checkpoint_id) {
    const auto env_it = cfg_.envs.find(task);
    if (env_it == cfg_.envs.end()) throw Error(ErrorCode::Validation, "task not served");
    const auto sc_it = cfg_.scenarios.find(scenario_id.empty() ? default_scenarios(task).front().id : scenario_id);
    if (sc_it == cfg_.scenarios.end()) throw Error(ErrorCode::NotFound, "unknown scenario '" + scenario_id + "'");
    if (sc_it->second.task != task) throw Error(ErrorCode::Validation, "scenario belongs to another task");
    auto params = store_->get(checkpoint_id, env_it->second.encoder->layout_hash());
    if (params->task != task) throw Error(ErrorCode::Validation, "checkpoint was trained for another task");

    expire_idle();
    auto s = std::make_shared<Session>();
    s->task = task;
    s->checkpoint_id = checkpoint_id;
    s->params = std::move(params);
    s->env = &env_it->second;
    s->state = DialogueState::start(sc_it->second, env_it->second.max_turns);
    s->last_activity = Clock::now();
    s->created_at = std::chrono::system_clock::now();

    std::unique_lock lock(sessions_mutex_);
    if (active_count() >= cfg_.max_active) throw Error(ErrorCode::Throttled, "too many active sessions");
    s->id = new_id();
    sessions_[s->id] = s;
    lock.unlock();

    std::lock_guard guard(s->mutex);
    const auto& utt = agent_turn(*s);
    auto out = describe(*s);
    out["agent"] = utterance_json(utt);
    return out;
  }

  nlohmann::json post_message(const std::string& id, const std::string& text) {
    auto s = find(id);
    std::lock_guard guard(s->mutex);
    if (s->state.status.terminal) throw Error(ErrorCode::Conflict, "session " + id + " has ended");
    if (trim(text).empty()) throw Error(ErrorCode::Validation, "message text is empty");
    s->last_activity = Clock::now();

    s->state = advance(s->state, Utterance{Speaker::User, std::string(trim(text)), std::nullopt, std::nullopt, 0});
    const auto goal = s->env->goals.detect(s->state, nullptr, *cfg_.catalog);
    const auto status = is_terminal(s->state, goal);
    record_turn(*s, status);
    nlohmann::json out;
    if (status.terminal) {
      finish(*s, status);
      out["agent"] = nullptr;
    } else {
      out["agent"] = utterance_json(agent_turn(*s));
    }
    out["status"] = status_json(*s);
    out["metrics"] = metrics_json(*s);
    return out;
  }

  nlohmann::json get(const std::string& id) {
    auto s = find(id);
    std::lock_guard guard(s->mutex);
    return describe(*s);
  }

  /// Ends a session. With an outcome the caller declares the result (a deal
  /// needs its price); without one the session is recorded as incomplete.
  nlohmann::json close(const std::string& id, std::optional<Outcome> declared = std::nullopt,
                       std::optional<Money> price = std::nullopt) {
    auto s = find(id);
    std::lock_guard guard(s->mutex);
    if (s->state.status.terminal) throw Error(ErrorCode::Conflict, "session " + id + " has ended");
    Outcome o = declared.value_or(Outcome::Incomplete);
    if (o == Outcome::Ongoing) throw Error(ErrorCode::Validation, "cannot close a session as ongoing");
    if (o == Outcome::SuccessDeal && s->task != TaskKind::PriceNegotiation) {
      throw Error(ErrorCode::Validation, "deal outcome only applies to price negotiation");
    }
    if (o == Outcome::SuccessDonation && s->task != TaskKind::CharityPersuasion) {
      throw Error(ErrorCode::Validation, "donation outcome only applies to charity persuasion");
    }
    if (o == Outcome::SuccessDeal && !price) throw Error(ErrorCode::Validation, "a declared deal needs deal_price");
    const auto status = TerminationStatus::of(o, o == Outcome::SuccessDeal ? price : std::nullopt);
    if (o != Outcome::Incomplete) record_turn(*s, status);
    finish(*s, status);
    return describe(*s);
  }

  /// Persists and ends sessions idle past the deadline. Returns how many.
  std::size_t expire_idle(Clock::time_point now = Clock::now()) {
    std::vector<std::shared_ptr<Session>> all;
    {
      std::shared_lock lock(sessions_mutex_);
      for (const auto& [_, s] : sessions_) all.push_back(s);
    }
    std::size_t n = 0;
    for (const auto& s : all) {
      std::unique_lock guard(s->mutex, std::try_to_lock);
      if (!guard.owns_lock() || s->state.status.terminal) continue;
      if (now - s->last_activity >= cfg_.idle_timeout) {
        finish(*s, TerminationStatus::of(Outcome::Incomplete));
        ++n;
      }
    }
    return n;
  }

  std::size_t active_sessions() {
    std::shared_lock lock(sessions_mutex_);
    return active_count();
  }

 private:
  struct Session {
    std::string id;
    TaskKind task{};
    std::string checkpoint_id;
    std::shared_ptr<const PolicyParameters> params;
    const EpisodeEnv* env = nullptr;
    DialogueState state;
    std::vector<double> rewards;
    std::optional<double> sl_ratio;
    Clock::time_point last_activity;
    std::chrono::system_clock::time_point created_at;
    bool persisted = false;
    std::mutex mutex;
  };

  std::size_t active_count() const {
    std::size_t n = 0;
    for (const auto& [_, s] : sessions_) {
      std::unique_lock guard(s->mutex, std::try_to_lock);
      if (!guard.owns_lock() || !s->state.status.terminal) ++n;
    }
    return n;
  }

  std::string new_id() {
    std::ostringstream os;
    os << std::hex << std::setfill('0') << std::setw(16) << id_rng_() << std::setw(16) << id_rng_();
    return os.str();
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::shared_lock lock(sessions_mutex_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw Error(ErrorCode::NotFound, "unknown session '" + id + "'");
    return it->second;
  }

  const Utterance& agent_turn(Session& s) {
    const auto& env = *s.env;
    const auto mental = env.tom.infer(s.state.history, s.task);
    const auto fv = env.encoder->encode(s.state.history, mental);
    const auto dist = policy_distribution(*s.params, fv);
    const auto& strategy = cfg_.catalog->strategy(s.task, select_strategy(dist, SelectMode::Greedy));
    Utterance u{Speaker::Agent, env.responder->respond(s.state, strategy), strategy.name, std::nullopt, 0};
    s.state = advance(s.state, std::move(u));
    return s.state.history.back();
  }

  void record_turn(Session& s, const TerminationStatus& status) {
    if (status.outcome == Outcome::SuccessDeal) {
      s.sl_ratio = sale_to_list_ratio(*status.deal_price, s.state.scenario.seller_target, s.state.scenario.buyer_target);
    }
    s.rewards.push_back(turn_reward(s.task, status, s.sl_ratio, s.env->reward));
  }

  void finish(Session& s, const TerminationStatus& status) {
    s.state = conclude(s.state, status);
    persist(s);
  }

  void persist(Session& s) {
    if (s.persisted) return;
    s.persisted = true;
    if (cfg_.archive_path.empty()) return;
    EpisodeRecord r;
    r.episode_id = "session-" + s.id;
    r.source = "human";
    r.simulator_id = "human";
    r.task = s.task;
    r.scenario_id = s.state.scenario.id;
    r.outcome = s.state.status;
    r.sl_ratio = s.sl_ratio;
    r.turns = s.state.turn_count;
    r.transcript = s.state.history;
    for (const auto& u : s.state.history) {
      if (u.agent_strategy) r.strategy_sequence.push_back(*u.agent_strategy);
      if (u.speaker == Speaker::User) r.resisting_sequence.push_back(u.resisting_strategy.value_or(""));
    }
    r.per_turn_rewards = s.rewards;
    if (!s.rewards.empty()) r.returns = discounted_returns(s.rewards, s.env->gamma, s.env->exponent);
    r.valid = s.state.status.outcome != Outcome::Incomplete;
    if (!r.valid) r.invalid_reason = "incomplete";
    std::lock_guard lock(archive_mutex_);
    append_archive(cfg_.archive_path, r);
  }

  static nlohmann::json utterance_json(const Utterance& u) {
    nlohmann::json j{{"speaker", u.speaker == Speaker::Agent ? "agent" : "user"}, {"text", u.text}, {"turn", u.turn_index}};
    j["strategy"] = u.agent_strategy ? nlohmann::json(*u.agent_strategy) : nlohmann::json(nullptr);
    return j;
  }

  nlohmann::json status_json(const Session& s) const {
    const auto& st = s.state.status;
    nlohmann::json j{{"terminal", st.terminal}, {"outcome", std::string(to_string(st.outcome))}};
    j["deal_price"] = st.deal_price ? nlohmann::json(st.deal_price->str()) : nlohmann::json(nullptr);
    j["sl_ratio"] = s.sl_ratio ? nlohmann::json(*s.sl_ratio) : nlohmann::json(nullptr);
    return j;
  }

  nlohmann::json metrics_json(const Session& s) const {
    std::map<std::string, int> used;
    for (const auto& u : s.state.history) {
      if (u.agent_strategy) ++used[*u.agent_strategy];
    }
    return {{"turns", s.state.turn_count}, {"max_turns", s.state.max_turns}, {"strategies_used", used}};
  }

  nlohmann::json describe(const Session& s) const {
    const auto& sc = s.state.scenario;
    nlohmann::json scenario{{"id", sc.id}};
    if (s.task == TaskKind::PriceNegotiation) {
      scenario["item_name"] = sc.item_name;
      scenario["item_description"] = sc.item_description;
      scenario["listing_price"] = sc.listing_price.str();
      scenario["buyer_target"] = sc.buyer_target.str();
      scenario["seller_target"] = sc.seller_target.str();
    } else {
      scenario["charity_info"] = sc.charity_info;
    }
    nlohmann::json transcript = nlohmann::json::array();
    for (const auto& u : s.state.history) transcript.push_back(utterance_json(u));
    return {{"session_id", s.id},
            {"task", std::string(to_string(s.task))},
            {"checkpoint", s.checkpoint_id},
            {"scenario", scenario},
            {"transcript", transcript},
            {"status", status_json(s)},
            {"metrics", metrics_json(s)}};
  }

  SessionConfig cfg_;
  std::shared_ptr<CheckpointStore> store_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  mutable std::shared_mutex sessions_mutex_;
  std::mutex archive_mutex_;
  std::mt19937_64 id_rng_;
};

// ---------------------------------------------------------------------------
// HTTP

inline int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::NotFound: return 404;
    case ErrorCode::Conflict:
    case ErrorCode::State:
    case ErrorCode::Alternation: return 409;
    case ErrorCode::Validation:
    case ErrorCode::InvalidRequest:
    case ErrorCode::CatalogMiss: return 400;
    case ErrorCode::Throttled: return 429;
    case ErrorCode::Gateway: return 502;
    default: return 500;
  }
}

inline std::string error_body(std::string_view code, const std::string& message) {
  return nlohmann::json{{"error", {{"code", std::string(code)}, {"message", message}}}}.dump();
}

/// Routes:
///   POST /sessions                 {"task", "scenario"?, "checkpoint"}
///   POST /sessions/{id}/messages   {"text"}
///   GET  /sessions/{id}
///   POST /sessions/{id}/close      {"outcome"?, "deal_price"?}
class SessionServer {
 public:
  explicit SessionServer(std::shared_ptr<SessionManager> manager) : manager_(std::move(manager)) { routes(); }

  httplib::Server& raw() { return server_; }

  /// Binds to `port` (0 picks a free one) and returns the bound port.
  int bind(const std::string& host = "127.0.0.1", int port = 0) {
    const int p = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (p < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
    return p;
  }

  void listen_after_bind() { server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  bool running() const { return server_.is_running(); }

 private:
  template <typename Fn>
  static void guarded(httplib::Response& res, Fn&& fn, int ok_status = 200) {
    try {
      auto body = fn();
      res.status = ok_status;
      res.set_content(body.dump(), "application/json");
    } catch (const Error& e) {
      res.status = http_status(e.code());
      res.set_content(error_body(to_string(e.code()), e.what()), "application/json");
    } catch (const nlohmann::json::exception& e) {
      res.status = 400;
      res.set_content(error_body("invalid_request", e.what()), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(error_body("internal", e.what()), "application/json");
    }
  }

  static nlohmann::json parse_body(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) throw Error(ErrorCode::InvalidRequest, "request body must be a JSON object");
    return j;
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server_.Options(R"(/sessions.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server_.Post("/sessions", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        if (!body.contains("task")) throw Error(ErrorCode::InvalidRequest, "missing field 'task'");
        if (!body.contains("checkpoint")) throw Error(ErrorCode::InvalidRequest, "missing field 'checkpoint'");
        TaskKind task;
        try {
          task = parse_task(body.at("task").get<std::string>());
        } catch (const Error& e) {
          throw Error(ErrorCode::InvalidRequest, e.what());
        }
        return manager_->create(task, body.value("scenario", ""), body.at("checkpoint").get<std::string>());
      }, 201);
    });
    server_.Post(R"(/sessions/([0-9a-zA-Z]+)/messages)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        if (!body.contains("text") || !body.at("text").is_string()) {
          throw Error(ErrorCode::InvalidRequest, "missing string field 'text'");
        }
        return manager_->post_message(req.matches[1], body.at("text").get<std::string>());
      });
    });
    server_.Get(R"(/sessions/([0-9a-zA-Z]+))", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] { return manager_->get(req.matches[1]); });
    });
    server_.Post(R"(/sessions/([0-9a-zA-Z]+)/close)", [this](const httplib::Request& req, httplib::Response& res) {
      guarded(res, [&] {
        const auto body = parse_body(req);
        std::optional<Outcome> outcome;
        std::optional<Money> price;
        if (body.contains("outcome")) outcome = parse_outcome(body.at("outcome").get<std::string>());
        if (body.contains("deal_price")) {
          const auto& p = body.at("deal_price");
          price = p.is_string() ? Money::parse(p.get<std::string>())
                                : Money::from_cents(std::llround(p.get<double>() * 100.0));
        }
        return manager_->close(req.matches[1], outcome, price);
      });
    });
  }

  std::shared_ptr<SessionManager> manager_;
  httplib::Server server_;
};

}  // namespace dialplan
