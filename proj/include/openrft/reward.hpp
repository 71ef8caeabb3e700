#pragma once

// Outcome reward, oracle process reward, aggregation and the weighted
// combination R = alpha * outcome + (1 - alpha) * f(process rewards).

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "openrft/common.hpp"
#include "openrft/task_env.hpp"

namespace openrft {

enum class Aggregation { mean, min, last, product };
enum class PrmMode { binary, soft };
enum class Placement { terminal, per_step };

inline std::string_view to_string(Aggregation a) {
  switch (a) {
    case Aggregation::mean: return "mean";
    case Aggregation::min: return "min";
    case Aggregation::last: return "last";
    case Aggregation::product: return "product";
  }
  return "?";
}
inline Aggregation parse_aggregation(std::string_view s) {
  if (s == "mean") return Aggregation::mean;
  if (s == "min") return Aggregation::min;
  if (s == "last") return Aggregation::last;
  if (s == "product") return Aggregation::product;
  throw ConfigError("unknown aggregation: " + std::string(s));
}
inline std::string_view to_string(PrmMode m) { return m == PrmMode::binary ? "binary" : "soft"; }
inline PrmMode parse_prm_mode(std::string_view s) {
  if (s == "binary") return PrmMode::binary;
  if (s == "soft") return PrmMode::soft;
  throw ConfigError("unknown prm_mode: " + std::string(s));
}
inline std::string_view to_string(Placement p) { return p == Placement::terminal ? "terminal" : "per_step"; }
inline Placement parse_placement(std::string_view s) {
  if (s == "terminal") return Placement::terminal;
  if (s == "per_step") return Placement::per_step;
  throw ConfigError("unknown placement: " + std::string(s));
}

struct RewardConfig {
  double alpha = 0.7;
  Aggregation aggregation = Aggregation::mean;
  PrmMode prm_mode = PrmMode::binary;
  double prm_scale = 10.0;  // soft mode only
  Placement placement = Placement::terminal;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must be in [0, 1]");
    if (prm_mode == PrmMode::soft && !(prm_scale > 0.0)) throw ConfigError("prm_scale must be positive in soft mode");
  }
  bool operator==(const RewardConfig&) const = default;
};

struct StepRewards {
  std::vector<double> process;  // pr_1..pr_m
  int outcome = 0;
  double combined = 0.0;
  bool operator==(const StepRewards&) const = default;
};

inline int outcome_reward(char predicted, char gold) {
  const int p = letter_index(predicted);
  return p >= 0 && p == letter_index(gold) ? 1 : 0;
}

// Oracle process reward of claiming `claim` at step t (1-based).
inline double process_reward(const Question& q, int t, int claim, const RewardConfig& cfg = {}) {
  if (t < 1 || t > q.num_steps()) throw EnvError("process_reward: step index out of range");
  const int gold = q.value_at(t);
  if (cfg.prm_mode == PrmMode::binary) return claim == gold ? 1.0 : 0.0;
  return std::exp(-std::abs(static_cast<double>(claim) - gold) / cfg.prm_scale);
}

inline double aggregate(std::span<const double> prs, Aggregation strategy) {
  if (prs.empty()) throw ConfigError("aggregate: empty process reward list");
  switch (strategy) {
    case Aggregation::mean: return std::accumulate(prs.begin(), prs.end(), 0.0) / static_cast<double>(prs.size());
    case Aggregation::min: return *std::min_element(prs.begin(), prs.end());
    case Aggregation::last: return prs.back();
    case Aggregation::product:
      return std::accumulate(prs.begin(), prs.end(), 1.0, [](double a, double b) { return a * b; });
  }
  return 0.0;
}

inline double combine(int outcome, std::span<const double> prs, const RewardConfig& cfg) {
  cfg.validate();
  if (cfg.alpha == 1.0) return static_cast<double>(outcome);
  return cfg.alpha * outcome + (1.0 - cfg.alpha) * aggregate(prs, cfg.aggregation);
}

// Rewards of a finished episode. A trajectory without an answer (truncated)
// has outcome 0.
inline StepRewards score_episode(const Question& q, std::span<const int> claims, std::optional<char> answer,
                                 const RewardConfig& cfg) {
  StepRewards r;
  for (std::size_t t = 0; t < claims.size(); ++t)
    r.process.push_back(process_reward(q, static_cast<int>(t) + 1, claims[t], cfg));
  r.outcome = answer ? outcome_reward(*answer, q.gold_letter) : 0;
  if (r.process.empty() && cfg.alpha != 1.0) {
    // Answer-only episode: no steps to score, the outcome is the reward.
    r.combined = static_cast<double>(r.outcome);
  } else {
    r.combined = combine(r.outcome, r.process, cfg);
  }
  return r;
}

// Per-action rewards for m steps plus the final answer (m + 1 entries).
// per_step spreads (1 - alpha) * pr_t / m over the steps; its episode total
// equals combine() when the aggregation is the mean.
inline std::vector<double> reward_schedule(const StepRewards& rewards, const RewardConfig& cfg) {
  cfg.validate();
  const std::size_t m = rewards.process.size();
  std::vector<double> out(m + 1, 0.0);
  if (cfg.placement == Placement::terminal || m == 0) {
    out[m] = rewards.combined;
    return out;
  }
  for (std::size_t t = 0; t < m; ++t) out[t] = (1.0 - cfg.alpha) * rewards.process[t] / static_cast<double>(m);
  out[m] = cfg.alpha * rewards.outcome;
  return out;
}

}  // namespace openrft
