#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dialplan {

/// Stable, machine-readable failure classes. The names double as the
/// `code` field of service error bodies, so they must not be renamed.
enum class ErrorCode {
  CatalogMiss,
  CatalogIntegrity,
  Generation,
  State,
  Alternation,
  DegenerateScenario,
  Gateway,
  Protocol,
  InvalidRequest,
  Balance,
  Template,
  Dimension,
  TrainingDivergence,
  JudgeInconsistency,
  Contract,
  Checkpoint,
  NotFound,
  Conflict,
  Validation,
  Throttled,
  Io,
  Aborted,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::CatalogMiss: return "catalog_miss";
    case ErrorCode::CatalogIntegrity: return "catalog_integrity";
    case ErrorCode::Generation: return "generation_error";
    case ErrorCode::State: return "state_error";
    case ErrorCode::Alternation: return "alternation_error";
    case ErrorCode::DegenerateScenario: return "degenerate_scenario";
    case ErrorCode::Gateway: return "gateway_error";
    case ErrorCode::Protocol: return "protocol_error";
    case ErrorCode::InvalidRequest: return "invalid_request";
    case ErrorCode::Balance: return "balance_error";
    case ErrorCode::Template: return "template_error";
    case ErrorCode::Dimension: return "dimension_error";
    case ErrorCode::TrainingDivergence: return "training_divergence";
    case ErrorCode::JudgeInconsistency: return "judge_inconsistency";
    case ErrorCode::Contract: return "contract_error";
    case ErrorCode::Checkpoint: return "checkpoint_error";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::Conflict: return "conflict";
    case ErrorCode::Validation: return "validation_error";
    case ErrorCode::Throttled: return "throttled";
    case ErrorCode::Io: return "io_error";
    case ErrorCode::Aborted: return "aborted";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Raised by the gateway once retries are exhausted.
class GatewayError : public Error {
 public:
  GatewayError(const std::string& message, int attempts)
      : Error(ErrorCode::Gateway, message + " (after " + std::to_string(attempts) + " attempts)"),
        attempts_(attempts) {}

  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// 64-bit FNV-1a. Used for feature hashing and layout fingerprints, where the
// value has to be identical across platforms and builds.
constexpr std::uint64_t fnv1a64(std::string_view text, std::uint64_t seed = 0xcbf29ce484222325ULL) {
  std::uint64_t h = seed;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a stream index.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  return mix64(base ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

using Rng = std::mt19937_64;

/// Uniform double in [0, 1) built from the raw 64-bit engine output, so draws
/// are identical across standard library implementations.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline bool bernoulli(Rng& rng, double p) {
  if (p <= 0.0) return false;
  if (p >= 1.0) return true;
  return uniform01(rng) < p;
}

/// Inverse-CDF draw from a probability vector. Falls back to the last index
/// with positive mass when rounding leaves the cumulative sum short of u.
inline std::size_t sample_index(std::span<const double> probs, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    acc += probs[i];
    if (u < acc) return i;
  }
  return last_positive;
}

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::Io, "sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::string replace_all(std::string text, std::string_view from, std::string_view to) {
  if (from.empty()) return text;
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
  return text;
}

}  // namespace dialplan
