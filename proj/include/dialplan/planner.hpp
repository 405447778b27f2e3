#pragma once

#include "dialplan/catalog.hpp"
#include "dialplan/dialogue.hpp"
#include "dialplan/tom.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <span>
#include <sstream>

namespace dialplan {

// ---------------------------------------------------------------------------
// Features

/// Block layout of the hashed encoder, in order:
///   turn     one-hot of completed turns (all zero before the first turn)
///   agent    per-strategy counts of the agent's past strategies
///   resist   per-strategy counts of the user's resisting strategies
///   dtail    hashed tokens of the last two utterances, L2-normalised
///   mental   hashed tokens of M, L2-normalised
///   future   hashed tokens of F, L2-normalised
struct FeatureLayout {
  TaskKind task{};
  std::size_t turn_slots = 10;
  std::size_t agent_slots = 0;
  std::size_t resist_slots = 8;
  std::size_t dtail_buckets = 64;
  std::size_t mental_buckets = 32;
  std::size_t future_buckets = 32;

  std::size_t turn_offset() const { return 0; }
  std::size_t agent_offset() const { return turn_offset() + turn_slots; }
  std::size_t resist_offset() const { return agent_offset() + agent_slots; }
  std::size_t dtail_offset() const { return resist_offset() + resist_slots; }
  std::size_t mental_offset() const { return dtail_offset() + dtail_buckets; }
  std::size_t future_offset() const { return mental_offset() + mental_buckets; }
  std::size_t dim() const { return future_offset() + future_buckets; }

  std::string describe() const {
    std::ostringstream os;
    os << "hashed-v1|task=" << to_string(task) << "|turn=" << turn_slots << "|agent=" << agent_slots
       << "|resist=" << resist_slots << "|dtail=" << dtail_buckets << "|mental=" << mental_buckets
       << "|future=" << future_buckets;
    return os.str();
  }

  std::uint64_t hash() const { return fnv1a64(describe()); }
};

struct FeatureVector {
  std::vector<double> values;
  std::uint64_t layout_hash = 0;

  std::size_t size() const { return values.size(); }
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

/// Maps {M, F, D} to a fixed-length vector.
class FeatureEncoder {
 public:
  virtual ~FeatureEncoder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::uint64_t layout_hash() const = 0;
  virtual std::string layout_description() const = 0;
  virtual FeatureVector encode(const std::vector<Utterance>& history, const MentalModel& mental) const = 0;
};

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

class HashedFeatureEncoder final : public FeatureEncoder {
 public:
  HashedFeatureEncoder(TaskKind task, const Catalog& catalog, std::size_t turn_slots = 10) : catalog_(&catalog) {
    layout_.task = task;
    layout_.turn_slots = turn_slots;
    layout_.agent_slots = catalog.strategy_count(task);
    layout_.resist_slots = catalog.resisting_strategies(task).size();
  }

  const FeatureLayout& layout() const { return layout_; }
  std::size_t dim() const override { return layout_.dim(); }
  std::uint64_t layout_hash() const override { return layout_.hash(); }
  std::string layout_description() const override { return layout_.describe(); }

  FeatureVector encode(const std::vector<Utterance>& history, const MentalModel& mental) const override {
    FeatureVector fv;
    fv.layout_hash = layout_.hash();
    fv.values.assign(layout_.dim(), 0.0);
    auto& v = fv.values;

    int turns = 0;
    for (const auto& u : history) {
      if (u.speaker == Speaker::User) ++turns;
    }
    if (turns > 0) v[layout_.turn_offset() + std::min<std::size_t>(turns, layout_.turn_slots) - 1] = 1.0;

    for (const auto& u : history) {
      if (u.agent_strategy) v[layout_.agent_offset() + catalog_->strategy(layout_.task, *u.agent_strategy).index] += 1.0;
      if (u.resisting_strategy) {
        if (auto r = catalog_->find_resisting(layout_.task, *u.resisting_strategy)) {
          v[layout_.resist_offset() + r->index] += 1.0;
        }
      }
    }

    std::string tail;
    for (std::size_t i = history.size() > 2 ? history.size() - 2 : 0; i < history.size(); ++i) {
      tail += history[i].text;
      tail += ' ';
    }
    hash_block(tail, layout_.dtail_offset(), layout_.dtail_buckets, v);
    if (mental.source != MentalSource::Empty) {
      hash_block(mental.mental_state, layout_.mental_offset(), layout_.mental_buckets, v);
      hash_block(mental.future_actions, layout_.future_offset(), layout_.future_buckets, v);
    }
    return fv;
  }

 private:
  static void hash_block(std::string_view text, std::size_t offset, std::size_t buckets, std::vector<double>& v) {
    if (buckets == 0) return;
    const auto tokens = tokenize(text);
    if (tokens.empty()) return;
    for (const auto& t : tokens) v[offset + fnv1a64(t) % buckets] += 1.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < buckets; ++i) norm += v[offset + i] * v[offset + i];
    norm = std::sqrt(norm);
    for (std::size_t i = 0; i < buckets; ++i) v[offset + i] /= norm;
  }

  const Catalog* catalog_;
  FeatureLayout layout_;
};

/// Encoding with the default hashed layout and the bundled catalog.
inline FeatureVector encode_features(const std::vector<Utterance>& history, const MentalModel& mental, TaskKind task) {
  return HashedFeatureEncoder(task, Catalog::bundled()).encode(history, mental);
}

// ---------------------------------------------------------------------------
// Policy

/// Linear softmax policy: logits = W x + b, W stored row-major with one row
/// per strategy.
struct PolicyParameters {
  TaskKind task{};
  std::size_t strategies = 0;
  std::size_t dim = 0;
  std::vector<double> weights;
  std::vector<double> bias;
  std::uint64_t layout_hash = 0;
  std::int64_t version = 0;

  static PolicyParameters zeros(TaskKind task, std::size_t strategies, std::size_t dim, std::uint64_t layout_hash = 0) {
    PolicyParameters p;
    p.task = task;
    p.strategies = strategies;
    p.dim = dim;
    p.weights.assign(strategies * dim, 0.0);
    p.bias.assign(strategies, 0.0);
    p.layout_hash = layout_hash;
    return p;
  }

  static PolicyParameters zeros(const HashedFeatureEncoder& enc, const Catalog& catalog) {
    return zeros(enc.layout().task, catalog.strategy_count(enc.layout().task), enc.dim(), enc.layout_hash());
  }

  double& w(std::size_t k, std::size_t j) { return weights[k * dim + j]; }
  double w(std::size_t k, std::size_t j) const { return weights[k * dim + j]; }

  bool finite() const {
    auto ok = [](double x) { return std::isfinite(x); };
    return std::all_of(weights.begin(), weights.end(), ok) && std::all_of(bias.begin(), bias.end(), ok);
  }

  void check_shape() const {
    if (weights.size() != strategies * dim || bias.size() != strategies) {
      throw Error(ErrorCode::Dimension, "policy parameter arrays do not match their declared shape");
    }
  }

  friend bool operator==(const PolicyParameters&, const PolicyParameters&) = default;
};

inline std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw Error(ErrorCode::Dimension, "softmax of an empty vector");
  const double mx = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (auto& x : p) x /= z;
  return p;
}

inline std::vector<double> policy_logits(const PolicyParameters& params, std::span<const double> x) {
  params.check_shape();
  if (x.size() != params.dim) {
    throw Error(ErrorCode::Dimension, "feature dimension " + std::to_string(x.size()) + " != policy dimension " +
                                          std::to_string(params.dim));
  }
  std::vector<double> logits(params.bias);
  for (std::size_t k = 0; k < params.strategies; ++k) {
    const double* row = params.weights.data() + k * params.dim;
    double s = 0.0;
    for (std::size_t j = 0; j < params.dim; ++j) s += row[j] * x[j];
    logits[k] += s;
  }
  return logits;
}

inline std::vector<double> policy_distribution(const PolicyParameters& params, const FeatureVector& features) {
  if (params.layout_hash != 0 && features.layout_hash != 0 && params.layout_hash != features.layout_hash) {
    throw Error(ErrorCode::Dimension, "feature layout does not match the policy's layout");
  }
  return softmax(policy_logits(params, features.values));
}

enum class SelectMode { Greedy, Sample };

/// Greedy breaks ties toward the lowest index; Sample draws from `dist`.
inline std::size_t select_strategy(std::span<const double> dist, SelectMode mode, Rng* rng = nullptr) {
  if (dist.empty()) throw Error(ErrorCode::Dimension, "empty strategy distribution");
  if (mode == SelectMode::Greedy) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dist.size(); ++i) {
      if (dist[i] > dist[best]) best = i;
    }
    return best;
  }
  if (!rng) throw Error(ErrorCode::Contract, "sampling selection needs a random source");
  return sample_index(dist, *rng);
}

/// Same shape as PolicyParameters, used for gradients and optimiser moments.
struct ParamGrad {
  std::vector<double> weights;
  std::vector<double> bias;

  static ParamGrad like(const PolicyParameters& p) {
    return {std::vector<double>(p.weights.size(), 0.0), std::vector<double>(p.bias.size(), 0.0)};
  }

  bool finite() const {
    auto ok = [](double x) { return std::isfinite(x); };
    return std::all_of(weights.begin(), weights.end(), ok) && std::all_of(bias.begin(), bias.end(), ok);
  }
};

/// grad += scale * d log pi(action | x) / d theta
inline void accumulate_log_prob_grad(const PolicyParameters& params, std::span<const double> x, std::size_t action,
                                     double scale, ParamGrad& grad) {
  const auto pi = softmax(policy_logits(params, x));
  if (action >= params.strategies) throw Error(ErrorCode::Dimension, "action index out of range");
  for (std::size_t k = 0; k < params.strategies; ++k) {
    const double coeff = scale * ((k == action ? 1.0 : 0.0) - pi[k]);
    if (coeff == 0.0) continue;
    double* row = grad.weights.data() + k * params.dim;
    for (std::size_t j = 0; j < params.dim; ++j) row[j] += coeff * x[j];
    grad.bias[k] += coeff;
  }
}

inline double log_prob(const PolicyParameters& params, std::span<const double> x, std::size_t action) {
  const auto logits = policy_logits(params, x);
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  return logits.at(action) - mx - std::log(z);
}

// ---------------------------------------------------------------------------
// Supervised initialisation

struct SftExample {
  FeatureVector features;
  std::size_t label = 0;
};

using SftBatch = std::vector<SftExample>;

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  ParamGrad m;
  ParamGrad v;
  std::int64_t step = 0;
};

inline double cross_entropy(const PolicyParameters& params, const SftBatch& batch) {
  if (batch.empty()) throw Error(ErrorCode::Contract, "cross entropy of an empty batch");
  double loss = 0.0;
  for (const auto& ex : batch) loss -= log_prob(params, ex.features.values, ex.label);
  return loss / static_cast<double>(batch.size());
}

struct SftResult {
  PolicyParameters params;
  double loss = 0.0;  // before the update
};

/// One AdamW step on mean cross-entropy. Weight decay is decoupled and
/// applied to the weight matrix only.
inline SftResult sft_step(PolicyParameters params, const SftBatch& batch, double lr, AdamWState& state,
                          const AdamWConfig& cfg = {}) {
  const double loss = cross_entropy(params, batch);
  if (!std::isfinite(loss)) throw Error(ErrorCode::TrainingDivergence, "non-finite SFT loss");
  if (state.m.weights.size() != params.weights.size()) {
    state.m = ParamGrad::like(params);
    state.v = ParamGrad::like(params);
    state.step = 0;
  }
  // Gradient of the loss is minus the mean log-prob gradient.
  ParamGrad g = ParamGrad::like(params);
  const double scale = -1.0 / static_cast<double>(batch.size());
  for (const auto& ex : batch) accumulate_log_prob_grad(params, ex.features.values, ex.label, scale, g);

  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  auto update = [&](std::vector<double>& theta, const std::vector<double>& grad, std::vector<double>& m,
                    std::vector<double>& v, bool decay) {
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      if (decay) theta[i] -= lr * cfg.weight_decay * theta[i];
      theta[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  };
  update(params.weights, g.weights, state.m.weights, state.v.weights, true);
  update(params.bias, g.bias, state.m.bias, state.v.bias, false);
  ++params.version;
  return {std::move(params), loss};
}

inline SftResult sft_step(const PolicyParameters& params, const SftBatch& batch, double lr) {
  AdamWState state;
  return sft_step(params, batch, lr, state);
}

struct SftConfig {
  std::size_t batch_size = 16;
  double lr = 6e-6;
  int epochs = 10;
  std::uint64_t seed = 0;
  double validation_fraction = 0.0;  // 0 keeps every example for training
  AdamWConfig adamw{};
};

struct SftReport {
  PolicyParameters params;         // best-validation parameters when validating, last otherwise
  double initial_loss = 0.0;       // full training set, before any update
  std::vector<double> epoch_loss;  // full training set, after each epoch
  std::vector<double> validation_loss;
  int best_epoch = -1;
};

inline SftReport sft_train(PolicyParameters params, std::vector<SftExample> examples, const SftConfig& cfg) {
  if (examples.empty()) throw Error(ErrorCode::Contract, "SFT corpus is empty");
  if (cfg.batch_size == 0) throw Error(ErrorCode::Validation, "batch size must be positive");
  Rng rng(cfg.seed);
  std::shuffle(examples.begin(), examples.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::floor(cfg.validation_fraction * static_cast<double>(examples.size())));
  SftBatch val(examples.end() - static_cast<std::ptrdiff_t>(n_val), examples.end());
  SftBatch train(examples.begin(), examples.end() - static_cast<std::ptrdiff_t>(n_val));
  if (train.empty()) throw Error(ErrorCode::Validation, "validation split leaves no training examples");

  SftReport rep;
  rep.initial_loss = cross_entropy(params, train);
  AdamWState state;
  double best_val = std::numeric_limits<double>::infinity();
  rep.params = params;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t start = 0; start < train.size(); start += cfg.batch_size) {
      const auto end = std::min(train.size(), start + cfg.batch_size);
      SftBatch batch(train.begin() + static_cast<std::ptrdiff_t>(start), train.begin() + static_cast<std::ptrdiff_t>(end));
      params = sft_step(std::move(params), batch, cfg.lr, state, cfg.adamw).params;
    }
    rep.epoch_loss.push_back(cross_entropy(params, train));
    if (!val.empty()) {
      const double vl = cross_entropy(params, val);
      rep.validation_loss.push_back(vl);
      if (vl < best_val) {
        best_val = vl;
        rep.best_epoch = epoch;
        rep.params = params;
      }
    } else {
      rep.best_epoch = epoch;
      rep.params = params;
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

inline nlohmann::json checkpoint_json(const PolicyParameters& p, const std::string& layout_description = {}) {
  p.check_shape();
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t k = 0; k < p.strategies; ++k) {
    rows.push_back(std::vector<double>(p.weights.begin() + static_cast<std::ptrdiff_t>(k * p.dim),
                                       p.weights.begin() + static_cast<std::ptrdiff_t>((k + 1) * p.dim)));
  }
  return {{"format", "dialplan-policy"},
          {"format_version", 1},
          {"task", std::string(to_string(p.task))},
          {"strategies", p.strategies},
          {"dim", p.dim},
          {"layout_hash", hex64(p.layout_hash)},
          {"layout", layout_description},
          {"version", p.version},
          {"weights", rows},
          {"bias", p.bias}};
}

/// Refuses checkpoints whose layout hash differs from `expected_layout`.
inline PolicyParameters policy_from_json(const nlohmann::json& j, std::optional<std::uint64_t> expected_layout) {
  try {
    if (j.at("format").get<std::string>() != "dialplan-policy") {
      throw Error(ErrorCode::Checkpoint, "not a policy checkpoint");
    }
    PolicyParameters p;
    p.task = parse_task(j.at("task").get<std::string>());
    p.strategies = j.at("strategies").get<std::size_t>();
    p.dim = j.at("dim").get<std::size_t>();
    p.layout_hash = std::stoull(j.at("layout_hash").get<std::string>(), nullptr, 16);
    p.version = j.value("version", std::int64_t{0});
    for (const auto& row : j.at("weights")) {
      const auto r = row.get<std::vector<double>>();
      if (r.size() != p.dim) throw Error(ErrorCode::Checkpoint, "checkpoint weight row has wrong length");
      p.weights.insert(p.weights.end(), r.begin(), r.end());
    }
    p.bias = j.at("bias").get<std::vector<double>>();
    if (p.weights.size() != p.strategies * p.dim || p.bias.size() != p.strategies) {
      throw Error(ErrorCode::Checkpoint, "checkpoint shape is inconsistent");
    }
    if (expected_layout && p.layout_hash != *expected_layout) {
      throw Error(ErrorCode::Checkpoint, "checkpoint layout " + hex64(p.layout_hash) + " does not match encoder layout " +
                                             hex64(*expected_layout));
    }
    if (!p.finite()) throw Error(ErrorCode::Checkpoint, "checkpoint contains non-finite values");
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Checkpoint, std::string("malformed checkpoint: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::Checkpoint, "malformed layout hash");
  }
}

inline void save_checkpoint(const std::filesystem::path& path, const PolicyParameters& p,
                            const std::string& layout_description = {}) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCode::Io, "cannot write checkpoint " + path.string());
    out << checkpoint_json(p, layout_description).dump(1) << '\n';
  }
  std::filesystem::rename(tmp, path);
}

inline PolicyParameters load_checkpoint(const std::filesystem::path& path, std::optional<std::uint64_t> expected_layout) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::NotFound, "checkpoint not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Checkpoint, "malformed checkpoint " + path.string() + ": " + e.what());
  }
  return policy_from_json(j, expected_layout);
}

}  // namespace dialplan
