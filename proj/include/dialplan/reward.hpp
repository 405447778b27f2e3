#pragma once

#include "dialplan/dialogue.hpp"
#include "dialplan/gateway.hpp"
#include "dialplan/tom.hpp"
#include "dialplan/user_simulator.hpp"

#include <cmath>

namespace dialplan {

inline constexpr double kTurnPenalty = -0.1;
inline constexpr double kFailureReward = -1.0;
inline constexpr double kDonationReward = 1.0;

struct JudgeConfig {
  int samples = 10;  // l
  double temperature = 1.0;
  RetryPolicy retry{};
};

namespace detail {

inline std::string judge_transcript(const DialogueState& state) {
  return std::string(kHistoryBanner) + render_transcript(state.history, state.task());
}

}  // namespace detail

/// Price negotiation: majority vote of `cfg.samples` judge answers to the
/// deal question, then a price follow-up on a positive verdict.
inline GoalStatus detect_deal(const DialogueState& state, Backend& judge, const Catalog& catalog,
                              const JudgeConfig& cfg = {}) {
  if (state.history.empty()) return GoalStatus::not_achieved();
  CompletionRequest req;
  req.system_prompt = catalog.prompt("judge_system_cb");
  req.messages.push_back({"user", detail::judge_transcript(state) + "\n\n" + catalog.prompt("judge_deal_question")});
  req.sample_count = cfg.samples;
  req.temperature = cfg.temperature;
  req.max_tokens = 16;
  const auto votes = complete(req, judge, cfg.retry).samples;
  const auto tally = tally_votes(votes);
  GoalStatus g;
  g.yes_votes = tally.yes;
  g.no_votes = tally.no;
  if (!majority_vote(votes)) return g;

  CompletionRequest price = req;
  price.messages.push_back({"assistant", "Yes"});
  price.messages.push_back({"user", catalog.prompt("judge_price_question")});
  price.sample_count = 1;
  price.temperature = 0.0;
  const auto reply = complete(price, judge, cfg.retry).samples.front();
  const auto amount = Money::find_in(reply);
  if (!amount) throw Error(ErrorCode::JudgeInconsistency, "judge confirmed a deal but gave no price: '" + reply + "'");
  g.achieved = true;
  g.deal_price = amount;
  return g;
}

/// Charity persuasion: the persuadee itself is asked the donation question.
inline GoalStatus detect_donation(const DialogueState& state, UserSimulator& persuadee, const Catalog& catalog,
                                  const JudgeConfig& cfg = {}) {
  if (state.history.empty()) return GoalStatus::not_achieved();
  const auto votes = persuadee.answer(state, catalog.prompt("donation_question"), cfg.samples);
  const auto tally = tally_votes(votes);
  GoalStatus g;
  g.yes_votes = tally.yes;
  g.no_votes = tally.no;
  g.achieved = majority_vote(votes);
  return g;
}

/// Charity persuasion with a human persuadee: a judge answers the donation
/// question on the persuadee's behalf from the transcript.
inline GoalStatus detect_donation_by_judge(const DialogueState& state, Backend& judge, const Catalog& catalog,
                                           const JudgeConfig& cfg = {}) {
  if (state.history.empty()) return GoalStatus::not_achieved();
  CompletionRequest req;
  req.system_prompt = catalog.prompt("judge_system_p4g");
  req.messages.push_back({"user", detail::judge_transcript(state) + "\n\n" + catalog.prompt("donation_question")});
  req.sample_count = cfg.samples;
  req.temperature = cfg.temperature;
  req.max_tokens = 16;
  const auto votes = complete(req, judge, cfg.retry).samples;
  const auto tally = tally_votes(votes);
  GoalStatus g;
  g.yes_votes = tally.yes;
  g.no_votes = tally.no;
  g.achieved = majority_vote(votes);
  return g;
}

struct RewardConfig {
  // Also charge the per-turn penalty on the terminal turn.
  bool stack_turn_penalty = false;
};

/// Reward of one turn given the status after it.
inline double turn_reward(TaskKind task, const TerminationStatus& status, std::optional<double> sl_ratio,
                          const RewardConfig& cfg = {}) {
  const double extra = cfg.stack_turn_penalty ? kTurnPenalty : 0.0;
  switch (status.outcome) {
    case Outcome::Ongoing:
      return kTurnPenalty;
    case Outcome::FailureMaxTurns:
    case Outcome::Incomplete:
      return kFailureReward + extra;
    case Outcome::SuccessDonation:
      return kDonationReward + extra;
    case Outcome::SuccessDeal:
      if (task != TaskKind::PriceNegotiation) throw Error(ErrorCode::Contract, "deal outcome outside price negotiation");
      if (!sl_ratio) throw Error(ErrorCode::Contract, "deal reward needs the sale-to-list ratio");
      return *sl_ratio + extra;
  }
  return 0.0;
}

enum class DiscountExponent {
  Literal,       // gamma^(T - t'): later rewards weigh more
  Conventional,  // gamma^(t' - t)
};

/// returns[t] = sum_{t' >= t} gamma^e * per_turn[t'], with e chosen by `exponent`.
inline std::vector<double> discounted_returns(const std::vector<double>& per_turn, double gamma,
                                              DiscountExponent exponent = DiscountExponent::Literal) {
  if (per_turn.empty()) throw Error(ErrorCode::Contract, "discounted_returns of an empty list");
  if (!(gamma > 0.0 && gamma <= 1.0)) throw Error(ErrorCode::Validation, "gamma must lie in (0, 1]");
  const std::size_t n = per_turn.size();
  std::vector<double> out(n);
  if (exponent == DiscountExponent::Literal) {
    double acc = 0.0;
    double w = 1.0;  // gamma^(T - t) for the current t, walking backwards
    for (std::size_t i = n; i-- > 0;) {
      acc += w * per_turn[i];
      out[i] = acc;
      w *= gamma;
    }
  } else {
    double acc = 0.0;
    for (std::size_t i = n; i-- > 0;) {
      acc = per_turn[i] + gamma * acc;
      out[i] = acc;
    }
  }
  return out;
}

struct RewardTrace {
  std::vector<double> per_turn;
  std::vector<double> returns;
  double gamma = 1.0;
};

inline RewardTrace make_trace(std::vector<double> per_turn, double gamma,
                              DiscountExponent exponent = DiscountExponent::Literal) {
  RewardTrace t;
  t.returns = discounted_returns(per_turn, gamma, exponent);
  t.per_turn = std::move(per_turn);
  t.gamma = gamma;
  return t;
}

}  // namespace dialplan
