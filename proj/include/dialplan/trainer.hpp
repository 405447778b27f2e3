#pragma once

#include "dialplan/evaluation.hpp"

#include <atomic>
#include <functional>

namespace dialplan {

/// L = -sum_t log pi(a_t | x_t) * (R_t - baseline)
inline double reinforce_loss(const PolicyParameters& params, const std::vector<StepLog>& steps,
                             const std::vector<double>& returns, double baseline = 0.0) {
  if (steps.size() != returns.size()) throw Error(ErrorCode::Contract, "step log and returns differ in length");
  double loss = 0.0;
  for (std::size_t t = 0; t < steps.size(); ++t) {
    loss -= log_prob(params, steps[t].features, steps[t].action) * (returns[t] - baseline);
  }
  return loss;
}

/// dL/dtheta for reinforce_loss.
inline ParamGrad reinforce_gradient(const PolicyParameters& params, const std::vector<StepLog>& steps,
                                    const std::vector<double>& returns, double baseline = 0.0) {
  if (steps.size() != returns.size()) throw Error(ErrorCode::Contract, "step log and returns differ in length");
  ParamGrad g = ParamGrad::like(params);
  for (std::size_t t = 0; t < steps.size(); ++t) {
    const double weight = returns[t] - baseline;
    if (weight != 0.0) accumulate_log_prob_grad(params, steps[t].features, steps[t].action, -weight, g);
  }
  return g;
}

struct UpdateResult {
  PolicyParameters params;
  bool applied = false;
  std::string skipped_reason;
};

/// One descent step on reinforce_loss, i.e. ascent on expected return.
/// Invalid episodes and non-finite gradients leave the parameters untouched.
inline UpdateResult reinforce_update(PolicyParameters params, const EpisodeRecord& episode, double lr,
                                     double baseline = 0.0) {
  if (!episode.valid) return {std::move(params), false, "invalid episode"};
  if (episode.steps.size() != episode.returns.size()) {
    throw Error(ErrorCode::Contract, "episode has no step log matching its returns");
  }
  const auto g = reinforce_gradient(params, episode.steps, episode.returns, baseline);
  if (!g.finite()) return {std::move(params), false, "non-finite gradient"};
  bool touched = false;
  auto step = [&](std::vector<double>& theta, const std::vector<double>& grad) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (grad[i] != 0.0) {
        theta[i] -= lr * grad[i];
        touched = true;
      }
    }
  };
  PolicyParameters next = params;
  step(next.weights, g.weights);
  step(next.bias, g.bias);
  if (!next.finite()) return {std::move(params), false, "non-finite parameters after update"};
  if (touched) ++next.version;
  return {std::move(next), true, {}};
}

struct TrainConfig {
  int episodes = 1000;
  double lr = 1e-6;
  double gamma = 0.999;
  int max_turns = 10;
  const Population* population = nullptr;
  bool tom_enabled = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 100;
  bool use_baseline = false;
  double baseline = 0.0;
  // Abort once at least min_episodes_for_abort ran and this share failed.
  double max_invalid_rate = 0.5;
  int min_episodes_for_abort = 20;
  // Curve evaluation; the training population when null.
  const Population* eval_population = nullptr;

  void validate() const {
    if (episodes <= 0) throw Error(ErrorCode::Validation, "episodes must be > 0");
    if (!(lr > 0.0)) throw Error(ErrorCode::Validation, "lr must be > 0");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw Error(ErrorCode::Validation, "gamma must lie in (0, 1]");
    if (max_turns < 1) throw Error(ErrorCode::Validation, "max_turns must be >= 1");
    if (!population) throw Error(ErrorCode::Validation, "training population is missing");
    population->validate();
  }

  nlohmann::json to_json() const {
    return {{"episodes", episodes},         {"lr", lr},
            {"gamma", gamma},               {"max_turns", max_turns},
            {"tom_enabled", tom_enabled},   {"seed", seed},
            {"checkpoint_every", checkpoint_every},
            {"use_baseline", use_baseline}, {"baseline", baseline},
            {"max_invalid_rate", max_invalid_rate}};
  }
};

struct CurvePoint {
  int episode = 0;  // episodes completed
  MetricsReport report;
};

struct TrainResult {
  PolicyParameters params;
  std::vector<CurvePoint> curve;
  std::vector<EpisodeRecord> episodes;  // training rollouts, step logs dropped
  int updates = 0;
  int invalid_episodes = 0;
  int divergences = 0;
  bool stopped = false;
};

struct TrainHooks {
  std::function<void(const CurvePoint&, const PolicyParameters&)> on_checkpoint;
  std::function<void(const EpisodeRecord&)> on_episode;
  const std::atomic<bool>* stop = nullptr;
};

/// Population REINFORCE: each episode samples a simulator by p, rolls out
/// with sampled strategies, then applies one update. Every checkpoint_every
/// episodes (and at the end) the greedy policy is evaluated for the curve.
inline TrainResult train(PolicyParameters params, const std::vector<Scenario>& scenarios, EpisodeEnv env,
                         const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (scenarios.empty()) throw Error(ErrorCode::Validation, "no training scenarios");
  env.max_turns = cfg.max_turns;
  env.gamma = cfg.gamma;
  env.keep_steps = true;
  if (!cfg.tom_enabled) env.tom = TomEngine::off();
  const Population& pop = *cfg.population;
  const Population& eval_pop = cfg.eval_population ? *cfg.eval_population : pop;

  TrainResult out;
  auto checkpoint = [&](int done) {
    EvalConfig ec;
    ec.seed = derive_seed(cfg.seed, 0xe7a1ULL);
    ec.id_prefix = "curve" + std::to_string(done);
    auto ev = evaluate(params, eval_pop, scenarios, env, ec);
    CurvePoint cp{done, std::move(ev.report)};
    if (hooks.on_checkpoint) hooks.on_checkpoint(cp, params);
    out.curve.push_back(std::move(cp));
  };

  int done = 0;
  for (int e = 0; e < cfg.episodes; ++e) {
    if (hooks.stop && hooks.stop->load()) {
      out.stopped = true;
      break;
    }
    Rng rng(derive_seed(cfg.seed, static_cast<std::uint64_t>(e)));
    const auto member = sample_simulator_index(pop, rng);
    const auto& scenario = scenarios[static_cast<std::size_t>(e) % scenarios.size()];
    auto rec = run_episode(params, pop.members[member], scenario, env, rng, SelectMode::Sample);
    rec.episode_id = "train-" + std::to_string(e);
    rec.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(e));
    if (rec.valid) {
      auto upd = reinforce_update(std::move(params), rec, cfg.lr, cfg.use_baseline ? cfg.baseline : 0.0);
      params = std::move(upd.params);
      if (upd.applied) {
        ++out.updates;
      } else {
        ++out.divergences;
      }
    } else {
      ++out.invalid_episodes;
    }
    rec.steps.clear();
    rec.steps.shrink_to_fit();
    if (hooks.on_episode) hooks.on_episode(rec);
    out.episodes.push_back(std::move(rec));
    done = e + 1;

    if (done >= cfg.min_episodes_for_abort &&
        static_cast<double>(out.invalid_episodes) / done > cfg.max_invalid_rate) {
      std::ostringstream os;
      os << "training aborted after " << done << " episodes: " << out.invalid_episodes << " invalid (rate "
         << static_cast<double>(out.invalid_episodes) / done << " > " << cfg.max_invalid_rate << ")";
      for (auto it = out.episodes.rbegin(); it != out.episodes.rend(); ++it) {
        if (!it->valid) {
          os << "; last failure: " << it->invalid_reason;
          break;
        }
      }
      throw Error(ErrorCode::Aborted, os.str());
    }
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0) checkpoint(done);
  }
  if (done > 0 && (out.curve.empty() || out.curve.back().episode != done)) checkpoint(done);
  out.params = std::move(params);
  return out;
}

}  // namespace dialplan
