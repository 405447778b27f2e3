#pragma once

#include "dialplan/episode.hpp"

#include <atomic>
#include <iomanip>
#include <map>
#include <thread>

namespace dialplan {

struct GroupMetrics {
  std::size_t episodes = 0;
  std::size_t successes = 0;
  double success_rate = 0.0;
  double average_turns = 0.0;
  double mean_sl_ratio = 0.0;

  friend bool operator==(const GroupMetrics&, const GroupMetrics&) = default;
};

struct MetricsReport {
  TaskKind task{};
  std::size_t episode_count = 0;  // valid episodes only
  std::size_t invalid_count = 0;
  bool empty = true;
  GroupMetrics overall;
  std::map<PersonaCategory, GroupMetrics> per_persona;

  double success_rate() const { return overall.success_rate; }
  double average_turns() const { return overall.average_turns; }
  double mean_sl_ratio() const { return overall.mean_sl_ratio; }
};

namespace detail {

inline GroupMetrics summarize(const std::vector<const EpisodeRecord*>& eps) {
  GroupMetrics g;
  g.episodes = eps.size();
  if (eps.empty()) return g;
  double turns = 0.0;
  double sl = 0.0;
  for (const auto* e : eps) {
    turns += e->turns;
    if (e->success()) {
      ++g.successes;
      sl += e->sl_ratio.value_or(0.0);
    }
  }
  const double n = static_cast<double>(eps.size());
  g.success_rate = static_cast<double>(g.successes) / n;
  g.average_turns = turns / n;
  g.mean_sl_ratio = sl / n;
  return g;
}

}  // namespace detail

/// SR, AT and SL% over the valid episodes; failures count SL% = 0.
inline MetricsReport aggregate(const std::vector<EpisodeRecord>& archive, TaskKind task) {
  MetricsReport rep;
  rep.task = task;
  std::vector<const EpisodeRecord*> valid;
  std::map<PersonaCategory, std::vector<const EpisodeRecord*>> by_persona;
  for (const auto& e : archive) {
    if (e.task != task) continue;
    if (!e.valid) {
      ++rep.invalid_count;
      continue;
    }
    valid.push_back(&e);
    if (e.persona) by_persona[*e.persona].push_back(&e);
  }
  rep.episode_count = valid.size();
  rep.empty = valid.empty();
  rep.overall = detail::summarize(valid);
  for (const auto& [cat, eps] : by_persona) rep.per_persona[cat] = detail::summarize(eps);
  return rep;
}

inline std::map<PersonaCategory, GroupMetrics> per_persona_breakdown(const std::vector<EpisodeRecord>& archive) {
  if (archive.empty()) throw Error(ErrorCode::Contract, "per-persona breakdown of an empty archive");
  return aggregate(archive, archive.front().task).per_persona;
}

inline nlohmann::json to_json(const GroupMetrics& g, TaskKind task) {
  nlohmann::json j{{"episodes", g.episodes},
                   {"successes", g.successes},
                   {"success_rate", g.success_rate},
                   {"average_turns", g.average_turns}};
  if (task == TaskKind::PriceNegotiation) j["mean_sl_ratio"] = g.mean_sl_ratio;
  return j;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& [cat, g] : r.per_persona) {
    auto row = to_json(g, r.task);
    row["persona_index"] = cat.index();
    row["persona"] = cat.label();
    per.push_back(row);
  }
  return {{"task", std::string(to_string(r.task))},
          {"episode_count", r.episode_count},
          {"invalid_count", r.invalid_count},
          {"empty", r.empty},
          {"overall", to_json(r.overall, r.task)},
          {"per_persona", per}};
}

struct PlotPoint {
  std::string category;
  std::string metric;
  double value = 0.0;
};

/// (category, metric, value) triples for radar-style per-persona plots.
inline std::vector<PlotPoint> plot_data(const MetricsReport& r) {
  std::vector<PlotPoint> out;
  for (const auto& [cat, g] : r.per_persona) {
    out.push_back({cat.label(), "SR", g.success_rate});
    out.push_back({cat.label(), "AT", g.average_turns});
    if (r.task == TaskKind::PriceNegotiation) out.push_back({cat.label(), "SL", g.mean_sl_ratio});
  }
  return out;
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string per_persona_csv(const MetricsReport& r) {
  std::string out = "persona_index,persona,episodes,successes,success_rate,average_turns,mean_sl_ratio\n";
  for (const auto& [cat, g] : r.per_persona) {
    out += std::to_string(cat.index()) + "," + cat.label() + "," + std::to_string(g.episodes) + "," +
           std::to_string(g.successes) + "," + format_double(g.success_rate) + "," + format_double(g.average_turns) +
           "," + (r.task == TaskKind::PriceNegotiation ? format_double(g.mean_sl_ratio) : std::string()) + "\n";
  }
  return out;
}

inline std::string plot_csv(const MetricsReport& r) {
  std::string out = "category,metric,value\n";
  for (const auto& p : plot_data(r)) out += p.category + "," + p.metric + "," + format_double(p.value) + "\n";
  return out;
}

/// Writes summary.json, per_persona.csv and plot_data.csv into `dir`.
inline void write_report(const std::filesystem::path& dir, const MetricsReport& r) {
  std::filesystem::create_directories(dir);
  auto put = [&dir](const char* name, const std::string& text) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + (dir / name).string());
    out << text;
  };
  put("summary.json", to_json(r).dump(2) + "\n");
  put("per_persona.csv", per_persona_csv(r));
  put("plot_data.csv", plot_csv(r));
}

struct EvalConfig {
  std::uint64_t seed = 0;
  int repeats = 1;  // episodes per (simulator, scenario) pair
  unsigned threads = 1;
  std::string id_prefix = "eval";
  SelectMode mode = SelectMode::Greedy;
};

struct EvalResult {
  MetricsReport report;
  std::vector<EpisodeRecord> archive;
};

/// One rollout per (simulator, scenario, repeat), greedy by default. Episode
/// i uses the seed derive_seed(cfg.seed, i), so results do not depend on
/// thread count.
inline EvalResult evaluate(const PolicyParameters& params, const Population& population,
                           const std::vector<Scenario>& scenarios, const EpisodeEnv& env, const EvalConfig& cfg = {}) {
  if (cfg.repeats < 1) throw Error(ErrorCode::Validation, "repeats must be >= 1");
  struct Job {
    std::size_t member;
    std::size_t scenario;
  };
  std::vector<Job> jobs;
  for (std::size_t m = 0; m < population.members.size(); ++m) {
    for (std::size_t s = 0; s < scenarios.size(); ++s) {
      for (int r = 0; r < cfg.repeats; ++r) jobs.push_back({m, s});
    }
  }
  EpisodeEnv local = env;
  local.keep_steps = false;
  EvalResult out;
  out.archive.resize(jobs.size());
  auto run = [&](std::size_t i) {
    Rng rng(derive_seed(cfg.seed, i));
    auto rec = run_episode(params, population.members[jobs[i].member], scenarios[jobs[i].scenario], local, rng, cfg.mode);
    rec.episode_id = cfg.id_prefix + "-" + std::to_string(i);
    rec.seed = derive_seed(cfg.seed, i);
    out.archive[i] = std::move(rec);
  };
  const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(jobs.size())));
  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < jobs.size();) {
          try {
            run(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
          }
        }
      });
    }
    for (auto& th : pool) th.join();
    if (failure) std::rethrow_exception(failure);
  }
  out.report = aggregate(out.archive, params.task);
  return out;
}

// ---------------------------------------------------------------------------
// Strategy-sequence distances

struct SequenceEncoder {
  std::string id;
  std::function<std::vector<double>(const std::vector<std::string>&)> encode;
};

/// Normalised strategy histogram followed by hashed, normalised bigram counts.
inline SequenceEncoder histogram_bigram_encoder(TaskKind task, const Catalog& catalog, std::size_t bigram_buckets = 32) {
  const auto k = catalog.strategy_count(task);
  return {"histogram-bigram-v1",
          [task, &catalog, k, bigram_buckets](const std::vector<std::string>& seq) {
            std::vector<double> v(k + bigram_buckets, 0.0);
            if (seq.empty()) return v;
            for (const auto& s : seq) v[catalog.strategy(task, s).index] += 1.0 / static_cast<double>(seq.size());
            if (seq.size() > 1 && bigram_buckets > 0) {
              const double w = 1.0 / static_cast<double>(seq.size() - 1);
              for (std::size_t i = 1; i < seq.size(); ++i) {
                v[k + fnv1a64(seq[i - 1] + "\x1f" + seq[i]) % bigram_buckets] += w;
              }
            }
            return v;
          }};
}

struct DistanceReport {
  double intra_persona = 0.0;
  double inter_persona = 0.0;
  std::string encoder_id;
  std::size_t intra_pairs = 0;
  std::size_t inter_pairs = 0;
  std::vector<PersonaCategory> personas;
  std::vector<std::string> warnings;

  /// (inter - intra) / inter, 0 when inter is 0.
  double separation_margin() const { return inter_persona > 0.0 ? (inter_persona - intra_persona) / inter_persona : 0.0; }
};

inline double euclidean(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw Error(ErrorCode::Dimension, "encoded sequences differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Mean pairwise Euclidean distance within and across personas. Personas
/// with fewer than two valid sequences are dropped with a warning.
inline DistanceReport strategy_sequence_distances(const std::vector<EpisodeRecord>& archive, const SequenceEncoder& encoder) {
  std::map<PersonaCategory, std::vector<std::vector<double>>> groups;
  for (const auto& e : archive) {
    if (e.valid && e.persona) groups[*e.persona].push_back(encoder.encode(e.strategy_sequence));
  }
  DistanceReport rep;
  rep.encoder_id = encoder.id;
  for (auto it = groups.begin(); it != groups.end();) {
    if (it->second.size() < 2) {
      rep.warnings.push_back("persona " + it->first.label() + " has fewer than 2 sequences; excluded");
      it = groups.erase(it);
    } else {
      rep.personas.push_back(it->first);
      ++it;
    }
  }
  if (groups.size() < 2) throw Error(ErrorCode::Validation, "distance analysis needs at least 2 personas with 2 sequences");

  double intra = 0.0;
  double inter = 0.0;
  for (auto a = groups.begin(); a != groups.end(); ++a) {
    const auto& va = a->second;
    for (std::size_t i = 0; i < va.size(); ++i) {
      for (std::size_t j = i + 1; j < va.size(); ++j) {
        intra += euclidean(va[i], va[j]);
        ++rep.intra_pairs;
      }
    }
    for (auto b = std::next(a); b != groups.end(); ++b) {
      for (const auto& x : va) {
        for (const auto& y : b->second) {
          inter += euclidean(x, y);
          ++rep.inter_pairs;
        }
      }
    }
  }
  rep.intra_persona = intra / static_cast<double>(rep.intra_pairs);
  rep.inter_persona = inter / static_cast<double>(rep.inter_pairs);
  return rep;
}

inline nlohmann::json to_json(const DistanceReport& d) {
  std::vector<std::string> personas;
  for (const auto& p : d.personas) personas.push_back(p.label());
  return {{"encoder_id", d.encoder_id},
          {"intra_persona", d.intra_persona},
          {"inter_persona", d.inter_persona},
          {"separation_margin", d.separation_margin()},
          {"intra_pairs", d.intra_pairs},
          {"inter_pairs", d.inter_pairs},
          {"personas", personas},
          {"warnings", d.warnings}};
}

}  // namespace dialplan
