#pragma once

#include "dialplan/catalog.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <regex>
#include <string>
#include <vector>

namespace dialplan {

/// Exact currency amount with two fractional digits.
class Money {
 public:
  constexpr Money() = default;
  static constexpr Money from_cents(std::int64_t cents) { return Money(cents); }
  static constexpr Money dollars(std::int64_t whole) { return Money(whole * 100); }

  /// Accepts "200", "$1,250.5", "199.99". More than two decimals is an error.
  static Money parse(std::string_view text) {
    auto t = std::string(trim(text));
    std::string digits;
    bool negative = false;
    bool seen_point = false;
    int decimals = 0;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const char c = t[i];
      if (c == '$' || c == ',') continue;
      if (c == '-' && digits.empty() && !negative) {
        negative = true;
        continue;
      }
      if (c == '.' && !seen_point) {
        seen_point = true;
        continue;
      }
      if (c < '0' || c > '9') throw Error(ErrorCode::Validation, "not a currency amount: '" + t + "'");
      if (seen_point && ++decimals > 2) throw Error(ErrorCode::Validation, "more than two decimals: '" + t + "'");
      digits.push_back(c);
    }
    if (digits.empty()) throw Error(ErrorCode::Validation, "not a currency amount: '" + t + "'");
    while (decimals < 2) {
      digits.push_back('0');
      ++decimals;
    }
    const auto cents = static_cast<std::int64_t>(std::stoll(digits));
    return Money(negative ? -cents : cents);
  }

  /// First amount found in free text, e.g. "They agreed on $200." -> 200.00.
  static std::optional<Money> find_in(std::string_view text) {
    static const std::regex kAmount(R"(-?\$?\s*\d[\d,]*(?:\.\d{1,2})?)");
    std::match_results<std::string_view::const_iterator> m;
    if (!std::regex_search(text.begin(), text.end(), m, kAmount)) return std::nullopt;
    auto token = m.str();
    token.erase(std::remove(token.begin(), token.end(), ' '), token.end());
    try {
      return parse(token);
    } catch (const Error&) {
      return std::nullopt;
    }
  }

  constexpr std::int64_t cents() const { return cents_; }
  double to_double() const { return static_cast<double>(cents_) / 100.0; }

  std::string str() const {
    const auto a = cents_ < 0 ? -cents_ : cents_;
    std::string frac = std::to_string(a % 100);
    if (frac.size() < 2) frac.insert(0, "0");
    return (cents_ < 0 ? "-" : "") + std::to_string(a / 100) + "." + frac;
  }

  /// "$200" for whole amounts, "$199.99" otherwise.
  std::string display() const {
    if (cents_ % 100 == 0) return "$" + std::to_string(cents_ / 100);
    return "$" + str();
  }

  friend constexpr Money operator+(Money a, Money b) { return Money(a.cents_ + b.cents_); }
  friend constexpr Money operator-(Money a, Money b) { return Money(a.cents_ - b.cents_); }
  friend constexpr auto operator<=>(Money, Money) = default;

 private:
  constexpr explicit Money(std::int64_t cents) : cents_(cents) {}
  std::int64_t cents_ = 0;
};

/// (deal - seller_target) / (buyer_target - seller_target), unclamped.
inline double sale_to_list_ratio(Money deal, Money seller_target, Money buyer_target) {
  if (buyer_target == seller_target) {
    throw Error(ErrorCode::DegenerateScenario, "buyer and seller targets are both " + seller_target.str());
  }
  return static_cast<double>((deal - seller_target).cents()) /
         static_cast<double>((buyer_target - seller_target).cents());
}

struct Scenario {
  TaskKind task{};
  std::string id;
  // Price negotiation
  std::string item_name;
  std::string item_description;
  Money seller_target;
  Money buyer_target;
  Money listing_price;
  // Charity persuasion
  std::string charity_info;
  bool persuadee_initial_intent = false;

  void validate() const {
    if (task == TaskKind::PriceNegotiation) {
      if (!(buyer_target < seller_target) || buyer_target <= Money{} || seller_target <= Money{}) {
        throw Error(ErrorCode::DegenerateScenario, "scenario " + id + ": need 0 < buyer_target < seller_target");
      }
    } else if (charity_info.empty()) {
      throw Error(ErrorCode::DegenerateScenario, "scenario " + id + ": charity_info is empty");
    }
  }
};

/// The bundled price-negotiation evaluation case (road bike, 285 vs 142).
inline Scenario road_bike_scenario() {
  Scenario s;
  s.task = TaskKind::PriceNegotiation;
  s.id = "cb-road-bike";
  s.item_name = "road bike";
  s.item_description = "A skillfully lugged and elegantly pantographed road bike";
  s.seller_target = Money::dollars(285);
  s.buyer_target = Money::dollars(142);
  s.listing_price = Money::dollars(285);
  return s;
}

inline Scenario save_the_children_scenario(bool initial_intent = false) {
  Scenario s;
  s.task = TaskKind::CharityPersuasion;
  s.id = initial_intent ? "p4g-stc-intent" : "p4g-stc";
  s.charity_info = "Save the Children: it works to help fight poverty around the world";
  s.persuadee_initial_intent = initial_intent;
  return s;
}

inline std::vector<Scenario> default_scenarios(TaskKind task) {
  if (task == TaskKind::PriceNegotiation) return {road_bike_scenario()};
  return {save_the_children_scenario()};
}

enum class Speaker { Agent, User };

struct Utterance {
  Speaker speaker = Speaker::Agent;
  std::string text;
  std::optional<std::string> agent_strategy;
  std::optional<std::string> resisting_strategy;
  int turn_index = 0;  // stamped by advance()

  friend bool operator==(const Utterance&, const Utterance&) = default;
};

enum class Outcome { Ongoing, SuccessDeal, SuccessDonation, FailureMaxTurns, Incomplete };

inline std::string_view to_string(Outcome o) {
  switch (o) {
    case Outcome::Ongoing: return "ongoing";
    case Outcome::SuccessDeal: return "success_deal";
    case Outcome::SuccessDonation: return "success_donation";
    case Outcome::FailureMaxTurns: return "failure_max_turns";
    case Outcome::Incomplete: return "incomplete";
  }
  return "";
}

inline Outcome parse_outcome(std::string_view s) {
  for (auto o : {Outcome::Ongoing, Outcome::SuccessDeal, Outcome::SuccessDonation, Outcome::FailureMaxTurns,
                 Outcome::Incomplete}) {
    if (to_string(o) == s) return o;
  }
  throw Error(ErrorCode::Validation, "unknown outcome '" + std::string(s) + "'");
}

inline bool is_success(Outcome o) { return o == Outcome::SuccessDeal || o == Outcome::SuccessDonation; }

struct TerminationStatus {
  bool terminal = false;
  Outcome outcome = Outcome::Ongoing;
  std::optional<Money> deal_price;  // SuccessDeal only

  static TerminationStatus ongoing() { return {}; }
  static TerminationStatus of(Outcome o, std::optional<Money> price = std::nullopt) {
    return {o != Outcome::Ongoing, o, price};
  }

  friend bool operator==(const TerminationStatus&, const TerminationStatus&) = default;
};

/// Result of goal detection for the latest completed turn.
struct GoalStatus {
  bool achieved = false;
  std::optional<Money> deal_price;
  int yes_votes = 0;
  int no_votes = 0;

  static GoalStatus not_achieved() { return {}; }
};

/// Immutable dialogue snapshot. Operations return new values.
struct DialogueState {
  Scenario scenario;
  std::vector<Utterance> history;
  int turn_count = 0;
  TerminationStatus status;
  int max_turns = 10;

  static DialogueState start(Scenario scenario, int max_turns = 10) {
    scenario.validate();
    if (max_turns < 1) throw Error(ErrorCode::Validation, "max_turns must be >= 1");
    DialogueState s;
    s.scenario = std::move(scenario);
    s.max_turns = max_turns;
    return s;
  }

  TaskKind task() const { return scenario.task; }
  bool ongoing() const { return !status.terminal; }

  /// Speaker whose utterance is expected next.
  Speaker next_speaker() const {
    return history.empty() || history.back().speaker == Speaker::User ? Speaker::Agent : Speaker::User;
  }
};

/// Appends an utterance. A turn is one Agent utterance followed by one User
/// utterance; turn_count increments when the User half arrives.
inline DialogueState advance(const DialogueState& state, Utterance utterance) {
  if (state.status.terminal) {
    throw Error(ErrorCode::State, "dialogue already ended (" + std::string(to_string(state.status.outcome)) + ")");
  }
  if (utterance.speaker != state.next_speaker()) {
    throw Error(ErrorCode::Alternation, utterance.speaker == Speaker::Agent ? "agent spoke out of turn"
                                                                             : "user spoke out of turn");
  }
  if (trim(utterance.text).empty()) throw Error(ErrorCode::Validation, "utterance text is empty");
  if (utterance.speaker == Speaker::Agent) {
    if (!utterance.agent_strategy) throw Error(ErrorCode::Contract, "agent utterance without strategy");
    if (utterance.resisting_strategy) throw Error(ErrorCode::Contract, "agent utterance with resisting strategy");
    if (state.turn_count >= state.max_turns) {
      throw Error(ErrorCode::State, "turn budget of " + std::to_string(state.max_turns) + " exhausted");
    }
  } else if (utterance.agent_strategy) {
    throw Error(ErrorCode::Contract, "user utterance with agent strategy");
  }
  DialogueState next = state;
  utterance.turn_index = state.turn_count + 1;
  const bool completes_turn = utterance.speaker == Speaker::User;
  next.history.push_back(std::move(utterance));
  if (completes_turn) ++next.turn_count;
  return next;
}

/// Goal is checked before the turn-budget cutoff, so a deal struck in the
/// final turn counts as a success.
inline TerminationStatus is_terminal(const DialogueState& state, const GoalStatus& goal) {
  if (state.status.terminal) return state.status;
  if (goal.achieved) {
    if (state.task() == TaskKind::PriceNegotiation) {
      if (!goal.deal_price) throw Error(ErrorCode::Contract, "deal reached without a deal price");
      return TerminationStatus::of(Outcome::SuccessDeal, goal.deal_price);
    }
    return TerminationStatus::of(Outcome::SuccessDonation);
  }
  if (state.turn_count >= state.max_turns) return TerminationStatus::of(Outcome::FailureMaxTurns);
  return TerminationStatus::ongoing();
}

inline DialogueState conclude(const DialogueState& state, const TerminationStatus& status) {
  DialogueState next = state;
  next.status = status;
  return next;
}

inline std::string_view speaker_label(TaskKind task, Speaker s) {
  if (task == TaskKind::PriceNegotiation) return s == Speaker::Agent ? "Buyer" : "Seller";
  return s == Speaker::Agent ? "Persuader" : "Persuadee";
}

/// One "Role: text" line per utterance.
inline std::string render_transcript(const std::vector<Utterance>& history, TaskKind task) {
  std::string out;
  for (const auto& u : history) {
    if (!out.empty()) out += '\n';
    out += speaker_label(task, u.speaker);
    out += ": ";
    out += u.text;
  }
  return out;
}

}  // namespace dialplan
