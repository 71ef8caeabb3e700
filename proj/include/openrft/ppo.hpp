#pragma once

// Rollouts, generalized advantage estimation and clipped-surrogate PPO with a
// KL penalty toward a fixed reference policy.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "openrft/common.hpp"
#include "openrft/optim.hpp"
#include "openrft/policy.hpp"
#include "openrft/reward.hpp"
#include "openrft/task_env.hpp"

namespace openrft {

struct PpoConfig {
  double clip_epsilon = 0.2;
  double kl_coeff = 0.01;
  double gamma = 1.0;
  double gae_lambda = 0.95;
  // Rescaled for the small scorer; the LoRA-on-8B values were 3e-5 / 6e-5.
  double actor_lr = 1e-3;
  double critic_lr = 2e-3;
  int rollouts_per_iter = 64;
  int update_epochs = 4;
  int minibatches = 4;
  int iterations = 0;
  double temperature = 0.6;
  bool normalize_advantages = true;
  // KL anchor; train_rft falls back to its starting parameters when unset.
  std::optional<PolicyParams> reference;

  void validate() const {
    if (!(clip_epsilon > 0.0 && clip_epsilon < 1.0)) throw ConfigError("clip_epsilon must be in (0, 1)");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must be in [0, 1]");
    if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ConfigError("gae_lambda must be in [0, 1]");
    if (!(kl_coeff >= 0.0)) throw ConfigError("kl_coeff must be >= 0");
    if (!(actor_lr > 0.0) || !(critic_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (rollouts_per_iter < 1 || update_epochs < 1 || minibatches < 1) throw ConfigError("ppo batch settings must be >= 1");
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  }
};

struct TrajectoryStep {
  MdpState state;
  ActionSet actions;
  std::size_t action = 0;
  double log_prob_old = 0.0;
  double reward = 0.0;
  double value = 0.0;
  FeatureMatrix features;
  std::vector<double> state_features;
};

struct Trajectory {
  std::int64_t question_id = 0;
  std::vector<TrajectoryStep> steps;
  std::optional<char> letter;
  std::vector<int> claims;
  StepRewards rewards;
};

// Samples an episode under `p`, recording features, log-probs and values,
// then fills per-step rewards from reward_schedule.
inline Trajectory rollout(const PolicyParams& p, const FeatureLayout& layout, const Env& env, const Question& q,
                          const RewardConfig& reward_cfg, double temperature, Rng& rng,
                          const ContextBlock* ctx = nullptr) {
  Trajectory traj;
  traj.question_id = q.id;
  MdpState s = env.initial(q);
  const int cap = env.max_actions(q);
  std::vector<double> probs, lps;
  for (int i = 0; i < cap && !s.terminal(); ++i) {
    TrajectoryStep step;
    step.actions = env.actions(q, s);
    step.features = featurize_actions(layout, q, s, step.actions, ctx);
    const auto logits = scorer_logits(p, step.features);
    softmax_into(logits, temperature, probs, lps);
    ActionDistribution dist;
    dist.probs = probs;
    dist.log_probs = lps;
    const SampledAction pick = sample_action(dist, rng);
    step.action = pick.index;
    step.log_prob_old = pick.log_prob;
    step.state_features = state_features(layout, q, s, step.actions.phase, ctx);
    step.value = value_from_features(p, step.state_features);
    step.state = s;
    s = env.transition(q, s, env.action_at(step.actions, pick.index));
    traj.steps.push_back(std::move(step));
  }
  traj.claims = s.claims;
  traj.letter = extract_answer(serialize_trace(q, s));
  traj.rewards = score_episode(q, traj.claims, traj.letter, reward_cfg);
  auto schedule = reward_schedule(traj.rewards, reward_cfg);
  if (!s.terminal()) {
    // Truncated: no answer action, so the whole return lands on the last step taken.
    const double total = std::accumulate(schedule.begin(), schedule.end(), 0.0);
    schedule.assign(traj.steps.size(), 0.0);
    if (!schedule.empty()) schedule.back() = total;
  }
  for (std::size_t i = 0; i < traj.steps.size(); ++i) traj.steps[i].reward = schedule[i];
  return traj;
}

inline Trajectory rollout(const PolicyParams& p, const FeatureLayout& layout, const Env& env, const Question& q,
                          const RewardConfig& reward_cfg, const PpoConfig& ppo_cfg, std::uint64_t seed,
                          const ContextBlock* ctx = nullptr) {
  Rng rng(seed);
  return rollout(p, layout, env, q, reward_cfg, ppo_cfg.temperature, rng, ctx);
}

// ---------------------------------------------------------------------------
// Advantages

struct Advantages {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// GAE over one episode with V(terminal) = 0.
inline Advantages compute_advantages(std::span<const double> rewards, std::span<const double> values, double gamma,
                                     double lambda) {
  const std::size_t n = rewards.size();
  Advantages out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double running = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double next_v = i + 1 < n ? values[i + 1] : 0.0;
    const double delta = rewards[i] + gamma * next_v - values[i];
    running = delta + gamma * lambda * running;
    out.advantages[i] = running;
    out.returns[i] = running + values[i];
  }
  return out;
}

inline Advantages compute_advantages(const Trajectory& traj, double gamma, double lambda) {
  std::vector<double> r, v;
  for (const auto& s : traj.steps) {
    r.push_back(s.reward);
    v.push_back(s.value);
  }
  return compute_advantages(r, v, gamma, lambda);
}

inline double clipped_term(double ratio, double advantage, double epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - epsilon, 1.0 + epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

// ---------------------------------------------------------------------------
// Surrogate objective

// One action of a batch with everything the update needs.
struct PpoSample {
  const TrajectoryStep* step = nullptr;
  double advantage = 0.0;
  double return_target = 0.0;
  std::vector<double> ref_log_probs;  // reference policy over the candidate set
};

inline std::vector<PpoSample> make_samples(const std::vector<Trajectory>& batch, const PpoConfig& cfg,
                                           const PolicyParams& reference) {
  std::vector<PpoSample> out;
  for (const auto& traj : batch) {
    const auto adv = compute_advantages(traj, cfg.gamma, cfg.gae_lambda);
    for (std::size_t i = 0; i < traj.steps.size(); ++i) {
      PpoSample s;
      s.step = &traj.steps[i];
      s.advantage = adv.advantages[i];
      s.return_target = adv.returns[i];
      std::vector<double> probs;
      softmax_into(scorer_logits(reference, traj.steps[i].features), cfg.temperature, probs, s.ref_log_probs);
      out.push_back(std::move(s));
    }
  }
  if (cfg.normalize_advantages && out.size() > 1) {
    double mean = 0.0;
    for (const auto& s : out) mean += s.advantage;
    mean /= static_cast<double>(out.size());
    double var = 0.0;
    for (const auto& s : out) var += (s.advantage - mean) * (s.advantage - mean);
    const double sd = std::sqrt(var / static_cast<double>(out.size()));
    for (auto& s : out) s.advantage = sd > 1e-8 ? (s.advantage - mean) / sd : s.advantage - mean;
  }
  return out;
}

struct SurrogateStats {
  double objective = 0.0;    // mean clipped term minus kl_coeff * mean KL
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double kl_sample = 0.0;    // mean of log pi_new(a) - log pi_ref(a)
  double kl_exact = 0.0;     // mean of KL(pi_new(.|s) || pi_ref(.|s))
};

// Actor objective over `samples`:
//   mean_i [ clipped_term(exp(lp_i - lp_old_i), A_i, eps) - kl_coeff * KL_i ]
// where KL_i is the divergence from the reference over the candidate set of
// sample i. When `grad` is nonempty its gradient is added to it.
inline SurrogateStats surrogate(const PolicyParams& p, std::span<const PpoSample* const> samples, const PpoConfig& cfg,
                                std::span<double> grad = {}) {
  SurrogateStats st;
  if (samples.empty()) return st;
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  const double T = cfg.temperature;
  const auto net = detail::scorer_net(p);
  const auto H = static_cast<std::size_t>(p.dims().hidden);
  std::vector<double> hs, probs, lps, coef;
  for (const PpoSample* s : samples) {
    const auto& f = s->step->features;
    const auto logits = scorer_logits(p, f, grad.empty() ? nullptr : &hs);
    softmax_into(logits, T, probs, lps);
    const std::size_t a = s->step->action;
    const double ratio = std::exp(lps[a] - s->step->log_prob_old);
    const double term = clipped_term(ratio, s->advantage, cfg.clip_epsilon);
    double kl = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) kl += probs[i] * (lps[i] - s->ref_log_probs[i]);
    st.objective += inv_n * (term - cfg.kl_coeff * kl);
    st.mean_ratio += inv_n * ratio;
    st.clip_fraction += inv_n * (std::abs(ratio - 1.0) > cfg.clip_epsilon ? 1.0 : 0.0);
    st.kl_sample += inv_n * (lps[a] - s->ref_log_probs[a]);
    st.kl_exact += inv_n * kl;
    if (grad.empty()) continue;
    // d term / d lp_a is A * ratio on the unclipped branch, 0 where the clip binds.
    const bool unclipped = ratio * s->advantage <= std::clamp(ratio, 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * s->advantage;
    const double d_lp = unclipped ? s->advantage * ratio : 0.0;
    coef.assign(probs.size(), 0.0);
    for (std::size_t i = 0; i < probs.size(); ++i) {
      const double one = i == a ? 1.0 : 0.0;
      // d lp_a / d logit_i = (1[i=a] - p_i) / T; d KL / d logit_i = p_i (lp_i - lq_i - KL) / T.
      coef[i] = inv_n * (d_lp * (one - probs[i]) - cfg.kl_coeff * probs[i] * (lps[i] - s->ref_log_probs[i] - kl)) / T;
    }
    for (int i = 0; i < f.rows; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      net.accumulate_grad(f.row(i), std::span<const double>(hs.data() + ui * H, H), coef[ui], grad);
    }
  }
  return st;
}

// Mean squared error of the value head against return targets.
inline double value_loss(const PolicyParams& p, std::span<const PpoSample* const> samples, std::span<double> grad = {}) {
  if (samples.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(samples.size());
  double loss = 0.0;
  for (const PpoSample* s : samples) {
    const double v = value_from_features(p, s->step->state_features);
    const double err = v - s->return_target;
    loss += inv_n * err * err;
    if (!grad.empty()) value_from_features(p, s->step->state_features, grad, 2.0 * inv_n * err);
  }
  return loss;
}

struct UpdateStats {
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double kl = 0.0;        // sample estimate after the update
  double kl_exact = 0.0;  // exact candidate-set KL after the update
  double value_loss = 0.0;
  double objective = 0.0;
  int optimizer_steps = 0;
  bool aborted = false;
  std::string diagnostic;
};

// Holds optimizer state across iterations.
class PpoLearner {
 public:
  PpoLearner(const PolicyParams& init, PpoConfig cfg, std::uint64_t seed)
      : cfg_(std::move(cfg)),
        actor_(OptimizerKind::adam, init.scorer_offset(), init.scorer_size(), cfg_.actor_lr),
        critic_(OptimizerKind::adam, init.value_offset(), init.value_size(), cfg_.critic_lr),
        rng_(derive_seed(seed, {0x990})) {
    cfg_.validate();
    if (!cfg_.reference) cfg_.reference = init;
    if (cfg_.reference->dims() != init.dims()) throw ConfigError("reference policy dims differ");
  }

  const PpoConfig& config() const { return cfg_; }

  // Runs update_epochs passes over the batch in `minibatches` shuffled chunks.
  // On a non-finite objective or gradient, `p` is restored and the stats
  // carry the diagnostic.
  UpdateStats update(PolicyParams& p, const std::vector<Trajectory>& batch) {
    UpdateStats stats;
    const PolicyParams before = p;
    const auto samples = make_samples(batch, cfg_, *cfg_.reference);
    if (samples.empty()) return stats;
    std::vector<const PpoSample*> order;
    for (const auto& s : samples) order.push_back(&s);
    std::vector<double> g_actor(p.size()), g_critic(p.size());
    const std::size_t n_mb = std::min<std::size_t>(static_cast<std::size_t>(cfg_.minibatches), order.size());
    for (int epoch = 0; epoch < cfg_.update_epochs; ++epoch) {
      rng_.shuffle(order);
      SurrogateStats epoch_stats;
      double epoch_vloss = 0.0;
      for (std::size_t m = 0; m < n_mb; ++m) {
        const std::size_t lo = m * order.size() / n_mb;
        const std::size_t hi = (m + 1) * order.size() / n_mb;
        std::span<const PpoSample* const> mb(order.data() + lo, hi - lo);
        std::fill(g_actor.begin(), g_actor.end(), 0.0);
        std::fill(g_critic.begin(), g_critic.end(), 0.0);
        SurrogateStats st;
        double vl = 0.0;
        try {
          st = surrogate(p, mb, cfg_, g_actor);
          vl = value_loss(p, mb, g_critic);
        } catch (const NumericError& e) {
          return abort(p, before, stats, e.what());
        }
        if (!std::isfinite(st.objective) || !std::isfinite(vl) || !all_finite(g_actor) || !all_finite(g_critic)) {
          std::ostringstream msg;
          msg << "non-finite PPO objective (objective " << st.objective << ", value loss " << vl << ") at epoch "
              << epoch << " minibatch " << m;
          return abort(p, before, stats, msg.str());
        }
        const double w = static_cast<double>(hi - lo) / static_cast<double>(order.size());
        epoch_stats.objective += w * st.objective;
        epoch_stats.mean_ratio += w * st.mean_ratio;
        epoch_stats.clip_fraction += w * st.clip_fraction;
        epoch_vloss += w * vl;
        for (double& x : g_actor) x = -x;  // ascend
        actor_.step(p.flat(), g_actor);
        critic_.step(p.flat(), g_critic);
        ++stats.optimizer_steps;
      }
      stats.objective = epoch_stats.objective;
      stats.mean_ratio = epoch_stats.mean_ratio;
      stats.clip_fraction = epoch_stats.clip_fraction;
      stats.value_loss = epoch_vloss;
    }
    if (!all_finite(p.flat())) return abort(p, before, stats, "non-finite parameters after update");
    std::vector<const PpoSample*> all;
    for (const auto& s : samples) all.push_back(&s);
    const auto after = surrogate(p, all, cfg_);
    stats.kl = after.kl_sample;
    stats.kl_exact = after.kl_exact;
    return stats;
  }

 private:
  static UpdateStats abort(PolicyParams& p, const PolicyParams& before, UpdateStats stats, std::string why) {
    p = before;
    stats.aborted = true;
    stats.diagnostic = std::move(why);
    return stats;
  }

  PpoConfig cfg_;
  Optimizer actor_;
  Optimizer critic_;
  Rng rng_;
};

// Single update with fresh optimizer state.
inline std::pair<PolicyParams, UpdateStats> ppo_update(const PolicyParams& p, const std::vector<Trajectory>& batch,
                                                       const PpoConfig& cfg, std::uint64_t seed = 0) {
  PpoLearner learner(p, cfg, seed);
  PolicyParams out = p;
  auto stats = learner.update(out, batch);
  return {std::move(out), std::move(stats)};
}

// ---------------------------------------------------------------------------
// Training loop

struct IterationMetrics {
  int iteration = 0;
  double mean_reward = 0.0;     // mean episode return
  double mean_outcome = 0.0;    // mean outcome reward (= train accuracy)
  double mean_process = 0.0;    // mean step correctness (binary PRM) over episodes with steps
  double clip_fraction = 0.0;
  double kl = 0.0;
  double value_loss = 0.0;
  double train_accuracy = 0.0;
  bool operator==(const IterationMetrics&) const = default;
};

// Compact per-episode log used to audit reward composition.
struct EpisodeLog {
  int iteration = 0;
  std::int64_t question_id = 0;
  int outcome = 0;
  int correct_steps = 0;
  int num_steps = 0;
  double combined = 0.0;
};

struct RftResult {
  PolicyParams params;
  std::vector<IterationMetrics> history;
  std::vector<EpisodeLog> episodes;  // filled when requested
  int optimizer_steps = 0;
};

struct RftOptions {
  const ContextMap* contexts = nullptr;
  bool log_episodes = false;
};

// Each iteration draws rollouts_per_iter questions by walking a shuffled copy
// of the pool, reshuffling whenever it is exhausted.
inline RftResult train_rft(const PolicyParams& p_init, const std::vector<Question>& pool, const FeatureLayout& layout,
                           const Env& env, const RewardConfig& reward_cfg, const PpoConfig& ppo_cfg, std::uint64_t seed,
                           const RftOptions& opts = {}) {
  reward_cfg.validate();
  ppo_cfg.validate();
  RftResult result;
  result.params = p_init;
  if (ppo_cfg.iterations == 0) return result;
  if (pool.empty()) throw ConfigError("train_rft: empty question pool");
  PpoLearner learner(p_init, ppo_cfg, seed);
  Rng pick_rng(derive_seed(seed, {0x51}));
  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  pick_rng.shuffle(order);
  std::size_t cursor = 0;
  RewardConfig binary_cfg = reward_cfg;
  binary_cfg.prm_mode = PrmMode::binary;
  for (int it = 0; it < ppo_cfg.iterations; ++it) {
    std::vector<Trajectory> batch;
    batch.reserve(static_cast<std::size_t>(ppo_cfg.rollouts_per_iter));
    IterationMetrics m;
    m.iteration = it;
    int with_steps = 0;
    for (int j = 0; j < ppo_cfg.rollouts_per_iter; ++j) {
      if (cursor == order.size()) {
        pick_rng.shuffle(order);
        cursor = 0;
      }
      const Question& q = pool[order[cursor++]];
      const ContextBlock* ctx = nullptr;
      if (opts.contexts) {
        auto c = opts.contexts->find(q.id);
        if (c != opts.contexts->end()) ctx = &c->second;
      }
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(it), static_cast<std::uint64_t>(j)}));
      Trajectory traj = rollout(result.params, layout, env, q, reward_cfg, ppo_cfg.temperature, rng, ctx);
      double ret = 0.0;
      for (const auto& s : traj.steps) ret += s.reward;
      m.mean_reward += ret;
      m.mean_outcome += traj.rewards.outcome;
      int correct = 0;
      for (std::size_t t = 0; t < traj.claims.size(); ++t)
        correct += process_reward(q, static_cast<int>(t) + 1, traj.claims[t], binary_cfg) == 1.0 ? 1 : 0;
      if (!traj.claims.empty()) {
        m.mean_process += static_cast<double>(correct) / static_cast<double>(traj.claims.size());
        ++with_steps;
      }
      if (opts.log_episodes)
        result.episodes.push_back({it, q.id, traj.rewards.outcome, correct, static_cast<int>(traj.claims.size()),
                                   traj.rewards.combined});
      batch.push_back(std::move(traj));
    }
    const double inv = 1.0 / static_cast<double>(ppo_cfg.rollouts_per_iter);
    m.mean_reward *= inv;
    m.mean_outcome *= inv;
    m.train_accuracy = m.mean_outcome;
    if (with_steps) m.mean_process /= with_steps;
    const UpdateStats st = learner.update(result.params, batch);
    if (st.aborted) throw NumericError("PPO update aborted at iteration " + std::to_string(it) + ": " + st.diagnostic);
    result.optimizer_steps += st.optimizer_steps;
    m.clip_fraction = st.clip_fraction;
    m.kl = st.kl;
    m.value_loss = st.value_loss;
    result.history.push_back(m);
  }
  return result;
}

// One JSON object per line: iteration, mean_reward, clip_fraction, kl,
// train_accuracy, then mean_outcome, mean_process, value_loss.
inline std::string write_history(const std::vector<IterationMetrics>& h) {
  std::string out;
  for (const auto& m : h) {
    nlohmann::ordered_json j;
    j["iteration"] = m.iteration;
    j["mean_reward"] = m.mean_reward;
    j["clip_fraction"] = m.clip_fraction;
    j["kl"] = m.kl;
    j["train_accuracy"] = m.train_accuracy;
    j["mean_outcome"] = m.mean_outcome;
    j["mean_process"] = m.mean_process;
    j["value_loss"] = m.value_loss;
    out += j.dump() + '\n';
  }
  return out;
}

}  // namespace openrft
