#pragma once

// Method matrix, generalist pretraining, evaluation protocol, data-scale
// sweep and report persistence.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "openrft/common.hpp"
#include "openrft/data.hpp"
#include "openrft/distill.hpp"
#include "openrft/policy.hpp"
#include "openrft/ppo.hpp"
#include "openrft/reward.hpp"
#include "openrft/task_env.hpp"

namespace openrft {

enum class Method { vanilla, reft, reft_prm, sft, sft_plus, sft_rl_prm, sft_rl_prm_da, sft_rl_prm_da_icl };

inline constexpr std::array<Method, 8> kAllMethods = {Method::vanilla,    Method::reft,          Method::reft_prm,
                                                      Method::sft,        Method::sft_plus,      Method::sft_rl_prm,
                                                      Method::sft_rl_prm_da, Method::sft_rl_prm_da_icl};

inline std::string_view to_string(Method m) {
  switch (m) {
    case Method::vanilla: return "vanilla";
    case Method::reft: return "reft";
    case Method::reft_prm: return "reft_prm";
    case Method::sft: return "sft";
    case Method::sft_plus: return "sft_plus";
    case Method::sft_rl_prm: return "sft_rl_prm";
    case Method::sft_rl_prm_da: return "sft_rl_prm_da";
    case Method::sft_rl_prm_da_icl: return "sft_rl_prm_da_icl";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (to_string(m) == s) return m;
  throw ConfigError("unknown method: " + std::string(s));
}

// ---------------------------------------------------------------------------
// Stage pipelines

enum class StageKind { icl_index, synthesize_self, synthesize_mismatched, sft, augment, rl };

struct Stage {
  StageKind kind;
  // rl only: outcome-only reward (alpha = 1) instead of the configured hybrid.
  bool outcome_only = false;
};

inline std::string_view to_string(StageKind k) {
  switch (k) {
    case StageKind::icl_index: return "icl_index";
    case StageKind::synthesize_self: return "synthesize_self";
    case StageKind::synthesize_mismatched: return "synthesize_mismatched";
    case StageKind::sft: return "sft";
    case StageKind::augment: return "augment";
    case StageKind::rl: return "rl";
  }
  return "?";
}

inline std::vector<Stage> method_pipeline(Method m) {
  using K = StageKind;
  switch (m) {
    case Method::vanilla: return {};
    case Method::reft: return {{K::rl, true}};
    case Method::reft_prm: return {{K::rl}};
    case Method::sft: return {{K::synthesize_self}, {K::sft}};
    case Method::sft_plus: return {{K::synthesize_mismatched}, {K::sft}};
    case Method::sft_rl_prm: return {{K::synthesize_self}, {K::sft}, {K::rl}};
    case Method::sft_rl_prm_da: return {{K::synthesize_self}, {K::sft}, {K::augment}, {K::rl}};
    case Method::sft_rl_prm_da_icl: return {{K::icl_index}, {K::synthesize_self}, {K::sft}, {K::augment}, {K::rl}};
  }
  return {};
}

// ---------------------------------------------------------------------------
// Configuration

struct PretrainConfig {
  int train_size = 200;
  int val_size = 100;
  double target_accuracy = 0.9;
  int max_epochs = 300;
  double learning_rate = 1e-2;
  int batch_size = 16;
};

struct IclConfig {
  int k = 3;
  int dim = kDefaultEmbeddingDim;
  // Condition the SFT stage as well as RL and evaluation.
  bool consistent = true;
};

// The module defaults move too slowly for the experiment budget; these are
// the step sizes the matrix and sweep run with.
inline PpoConfig experiment_ppo_defaults() {
  PpoConfig c;
  c.actor_lr = 1e-2;
  return c;
}

inline SftConfig experiment_sft_defaults() {
  SftConfig c;
  c.learning_rate = 1e-2;
  return c;
}

struct ExperimentConfig {
  Method method = Method::vanilla;
  TaskSpec source = TaskSpec::source(4);
  TaskSpec target = TaskSpec::target(4);
  int train_size = 100;
  int test_size = 100;
  int eval_repeats = 3;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  double temperature = 0.6;
  int hidden = 32;
  RewardConfig reward;
  PpoConfig ppo = experiment_ppo_defaults();
  // RL episodes per pool question; sets PPO iterations when ppo.iterations == 0.
  double rl_passes = 64.0;
  SftConfig sft = experiment_sft_defaults();
  // Training questions used for synthesis + SFT; 0 means all of train_size.
  int sft_size = 0;
  SynthesisConfig synthesis;
  int mismatch_granularity = 2;
  AugmentConfig augment;
  IclConfig icl;
  PretrainConfig pretrain;
  std::string output_dir = "runs";

  void validate() const {
    source.validate();
    target.validate();
    if (source.domain != Domain::source) throw ConfigError("source spec must use the source domain");
    if (train_size < 1 || test_size < 1) throw ConfigError("train_size and test_size must be >= 1");
    if (eval_repeats < 1) throw ConfigError("eval_repeats must be >= 1");
    if (seeds.empty()) throw ConfigError("seeds must be nonempty");
    if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (hidden < 1) throw ConfigError("hidden must be >= 1");
    if (!(rl_passes > 0.0)) throw ConfigError("rl_passes must be positive");
    if (sft_size < 0) throw ConfigError("sft_size must be >= 0");
    if (mismatch_granularity < 1) throw ConfigError("mismatch_granularity must be >= 1");
    if (icl.k < 1 || icl.dim < 1) throw ConfigError("icl k and dim must be >= 1");
    if (pretrain.train_size < 1 || pretrain.val_size < 1 || pretrain.max_epochs < 1) throw ConfigError("bad pretrain sizes");
    reward.validate();
    ppo.validate();
    sft.validate();
    augment.validate();
  }

  FeatureLayout layout() const {
    FeatureLayout l;
    l.value_bound = target.value_bound;
    l.operand_scale = std::max({std::abs(target.operand_max), std::abs(target.operand_min), 1});
    l.context_dim = icl.dim + icl.k;
    return l;
  }
};

inline nlohmann::ordered_json task_spec_to_json(const TaskSpec& s) {
  nlohmann::ordered_json j;
  j["num_steps"] = s.num_steps;
  auto kinds = nlohmann::ordered_json::array();
  for (OpKind k : s.op_kinds) kinds.push_back(std::string(to_string(k)));
  j["op_kinds"] = kinds;
  j["operand_range"] = {s.operand_min, s.operand_max};
  j["start_range"] = {s.start_min, s.start_max};
  j["num_options"] = s.num_options;
  j["num_candidates"] = s.num_candidates;
  j["value_bound"] = s.value_bound;
  j["domain_tag"] = std::string(to_string(s.domain));
  return j;
}

namespace detail {

// Rejects keys outside `allowed` so typos in config files surface.
inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, std::string_view where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end())
      throw ConfigError(std::string(where) + ": unknown key '" + it.key() + "'");
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace detail

inline TaskSpec task_spec_from_json(const nlohmann::json& j, TaskSpec s) {
  detail::check_keys(j, {"num_steps", "op_kinds", "operand_range", "start_range", "num_options", "num_candidates",
                         "value_bound", "domain_tag"},
                     "task spec");
  detail::read_opt(j, "num_steps", s.num_steps);
  if (j.contains("op_kinds")) {
    s.op_kinds.clear();
    for (const auto& k : j["op_kinds"]) s.op_kinds.push_back(parse_op_kind(k.get<std::string>()));
  }
  if (j.contains("operand_range")) {
    s.operand_min = j["operand_range"].at(0).get<int>();
    s.operand_max = j["operand_range"].at(1).get<int>();
  }
  if (j.contains("start_range")) {
    s.start_min = j["start_range"].at(0).get<int>();
    s.start_max = j["start_range"].at(1).get<int>();
  }
  detail::read_opt(j, "num_options", s.num_options);
  detail::read_opt(j, "num_candidates", s.num_candidates);
  detail::read_opt(j, "value_bound", s.value_bound);
  if (j.contains("domain_tag")) s.domain = parse_domain(j["domain_tag"].get<std::string>());
  return s;
}

inline nlohmann::ordered_json reward_config_to_json(const RewardConfig& r) {
  nlohmann::ordered_json j;
  j["alpha"] = r.alpha;
  j["aggregation"] = std::string(to_string(r.aggregation));
  j["prm_mode"] = std::string(to_string(r.prm_mode));
  j["prm_scale"] = r.prm_scale;
  j["placement"] = std::string(to_string(r.placement));
  return j;
}

inline RewardConfig reward_config_from_json(const nlohmann::json& j, RewardConfig r = {}) {
  detail::check_keys(j, {"alpha", "aggregation", "prm_mode", "prm_scale", "placement"}, "reward");
  detail::read_opt(j, "alpha", r.alpha);
  if (j.contains("aggregation")) r.aggregation = parse_aggregation(j["aggregation"].get<std::string>());
  if (j.contains("prm_mode")) r.prm_mode = parse_prm_mode(j["prm_mode"].get<std::string>());
  detail::read_opt(j, "prm_scale", r.prm_scale);
  if (j.contains("placement")) r.placement = parse_placement(j["placement"].get<std::string>());
  return r;
}

inline nlohmann::ordered_json experiment_config_to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["method"] = std::string(to_string(c.method));
  j["source"] = task_spec_to_json(c.source);
  j["target"] = task_spec_to_json(c.target);
  j["train_size"] = c.train_size;
  j["test_size"] = c.test_size;
  j["eval_repeats"] = c.eval_repeats;
  j["seeds"] = c.seeds;
  j["temperature"] = c.temperature;
  j["hidden"] = c.hidden;
  j["reward"] = reward_config_to_json(c.reward);
  nlohmann::ordered_json p;
  p["clip_epsilon"] = c.ppo.clip_epsilon;
  p["kl_coeff"] = c.ppo.kl_coeff;
  p["gamma"] = c.ppo.gamma;
  p["gae_lambda"] = c.ppo.gae_lambda;
  p["actor_lr"] = c.ppo.actor_lr;
  p["critic_lr"] = c.ppo.critic_lr;
  p["rollouts_per_iter"] = c.ppo.rollouts_per_iter;
  p["update_epochs"] = c.ppo.update_epochs;
  p["minibatches"] = c.ppo.minibatches;
  p["iterations"] = c.ppo.iterations;
  p["normalize_advantages"] = c.ppo.normalize_advantages;
  j["ppo"] = p;
  j["rl_passes"] = c.rl_passes;
  nlohmann::ordered_json s;
  s["learning_rate"] = c.sft.learning_rate;
  s["epochs"] = c.sft.epochs;
  s["batch_size"] = c.sft.batch_size;
  s["shuffle_seed"] = c.sft.shuffle_seed;
  s["optimizer"] = c.sft.optimizer == OptimizerKind::adam ? "adam" : "sgd";
  j["sft"] = s;
  j["sft_size"] = c.sft_size;
  nlohmann::ordered_json sy;
  sy["max_attempts"] = c.synthesis.max_attempts;
  sy["retention"] = c.synthesis.retention == Retention::first_success ? "first_success" : "best_by_prm";
  j["synthesis"] = sy;
  j["mismatch_granularity"] = c.mismatch_granularity;
  nlohmann::ordered_json a;
  a["n_variants"] = c.augment.n_variants;
  a["shuffle_seed"] = c.augment.shuffle_seed;
  a["corruption_prob"] = c.augment.corruption_prob;
  j["augment"] = a;
  nlohmann::ordered_json ic;
  ic["k"] = c.icl.k;
  ic["dim"] = c.icl.dim;
  ic["consistent"] = c.icl.consistent;
  j["icl"] = ic;
  nlohmann::ordered_json pt;
  pt["train_size"] = c.pretrain.train_size;
  pt["val_size"] = c.pretrain.val_size;
  pt["target_accuracy"] = c.pretrain.target_accuracy;
  pt["max_epochs"] = c.pretrain.max_epochs;
  pt["learning_rate"] = c.pretrain.learning_rate;
  pt["batch_size"] = c.pretrain.batch_size;
  j["pretrain"] = pt;
  j["output_dir"] = c.output_dir;
  return j;
}

// Overlays the keys present in `j` onto `base`.
inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig c = {}) {
  using detail::read_opt;
  detail::check_keys(j, {"method", "source", "target", "train_size", "test_size", "eval_repeats", "seeds", "temperature",
                         "hidden", "reward", "ppo", "rl_passes", "sft", "sft_size", "synthesis", "mismatch_granularity",
                         "augment", "icl", "pretrain", "output_dir"},
                     "experiment config");
  try {
    if (j.contains("method")) c.method = parse_method(j["method"].get<std::string>());
    if (j.contains("source")) c.source = task_spec_from_json(j["source"], c.source);
    if (j.contains("target")) c.target = task_spec_from_json(j["target"], c.target);
    read_opt(j, "train_size", c.train_size);
    read_opt(j, "test_size", c.test_size);
    read_opt(j, "eval_repeats", c.eval_repeats);
    read_opt(j, "seeds", c.seeds);
    read_opt(j, "temperature", c.temperature);
    read_opt(j, "hidden", c.hidden);
    if (j.contains("reward")) c.reward = reward_config_from_json(j["reward"], c.reward);
    if (j.contains("ppo")) {
      const auto& p = j["ppo"];
      detail::check_keys(p, {"clip_epsilon", "kl_coeff", "gamma", "gae_lambda", "actor_lr", "critic_lr", "rollouts_per_iter",
                             "update_epochs", "minibatches", "iterations", "normalize_advantages"},
                         "ppo");
      read_opt(p, "clip_epsilon", c.ppo.clip_epsilon);
      read_opt(p, "kl_coeff", c.ppo.kl_coeff);
      read_opt(p, "gamma", c.ppo.gamma);
      read_opt(p, "gae_lambda", c.ppo.gae_lambda);
      read_opt(p, "actor_lr", c.ppo.actor_lr);
      read_opt(p, "critic_lr", c.ppo.critic_lr);
      read_opt(p, "rollouts_per_iter", c.ppo.rollouts_per_iter);
      read_opt(p, "update_epochs", c.ppo.update_epochs);
      read_opt(p, "minibatches", c.ppo.minibatches);
      read_opt(p, "iterations", c.ppo.iterations);
      read_opt(p, "normalize_advantages", c.ppo.normalize_advantages);
    }
    read_opt(j, "rl_passes", c.rl_passes);
    if (j.contains("sft")) {
      const auto& s = j["sft"];
      detail::check_keys(s, {"learning_rate", "epochs", "batch_size", "shuffle_seed", "optimizer"}, "sft");
      read_opt(s, "learning_rate", c.sft.learning_rate);
      read_opt(s, "epochs", c.sft.epochs);
      read_opt(s, "batch_size", c.sft.batch_size);
      read_opt(s, "shuffle_seed", c.sft.shuffle_seed);
      if (s.contains("optimizer")) {
        const auto o = s["optimizer"].get<std::string>();
        if (o == "adam") c.sft.optimizer = OptimizerKind::adam;
        else if (o == "sgd") c.sft.optimizer = OptimizerKind::sgd;
        else throw ConfigError("unknown optimizer: " + o);
      }
    }
    read_opt(j, "sft_size", c.sft_size);
    if (j.contains("synthesis")) {
      const auto& s = j["synthesis"];
      detail::check_keys(s, {"max_attempts", "retention"}, "synthesis");
      read_opt(s, "max_attempts", c.synthesis.max_attempts);
      if (s.contains("retention")) {
        const auto r = s["retention"].get<std::string>();
        if (r == "first_success") c.synthesis.retention = Retention::first_success;
        else if (r == "best_by_prm") c.synthesis.retention = Retention::best_by_prm;
        else throw ConfigError("unknown retention: " + r);
      }
    }
    read_opt(j, "mismatch_granularity", c.mismatch_granularity);
    if (j.contains("augment")) {
      const auto& a = j["augment"];
      detail::check_keys(a, {"n_variants", "shuffle_seed", "corruption_prob"}, "augment");
      read_opt(a, "n_variants", c.augment.n_variants);
      read_opt(a, "shuffle_seed", c.augment.shuffle_seed);
      read_opt(a, "corruption_prob", c.augment.corruption_prob);
    }
    if (j.contains("icl")) {
      const auto& ic = j["icl"];
      detail::check_keys(ic, {"k", "dim", "consistent"}, "icl");
      read_opt(ic, "k", c.icl.k);
      read_opt(ic, "dim", c.icl.dim);
      read_opt(ic, "consistent", c.icl.consistent);
    }
    if (j.contains("pretrain")) {
      const auto& pt = j["pretrain"];
      detail::check_keys(pt, {"train_size", "val_size", "target_accuracy", "max_epochs", "learning_rate", "batch_size"},
                         "pretrain");
      read_opt(pt, "train_size", c.pretrain.train_size);
      read_opt(pt, "val_size", c.pretrain.val_size);
      read_opt(pt, "target_accuracy", c.pretrain.target_accuracy);
      read_opt(pt, "max_epochs", c.pretrain.max_epochs);
      read_opt(pt, "learning_rate", c.pretrain.learning_rate);
      read_opt(pt, "batch_size", c.pretrain.batch_size);
    }
    read_opt(j, "output_dir", c.output_dir);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

// Short hex digest identifying a configuration.
inline std::string run_id(const ExperimentConfig& c) {
  auto j = experiment_config_to_json(c);
  j.erase("output_dir");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
  return std::string(buf, 12);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalStats {
  std::vector<double> per_repeat;
  double mean = 0.0;
};

// One sampled episode per question per repeat; the prediction is extracted
// from the serialized trace and unparseable traces count as wrong.
template <ActionChooser C>
EvalStats evaluate_with(const C& chooser, const std::vector<Question>& testset, const Env& env, int repeats,
                        std::uint64_t seed, int max_actions = -1) {
  if (repeats < 1) throw ConfigError("evaluate: repeats must be >= 1");
  if (testset.empty()) throw ConfigError("evaluate: empty test set");
  EvalStats st;
  for (int r = 0; r < repeats; ++r) {
    int correct = 0;
    for (const Question& q : testset) {
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(q.id)}));
      const MdpState s = play_episode(chooser, q, env, rng, max_actions);
      const auto letter = extract_answer(serialize_trace(q, s));
      correct += letter && outcome_reward(*letter, q.gold_letter) == 1 ? 1 : 0;
    }
    st.per_repeat.push_back(static_cast<double>(correct) / static_cast<double>(testset.size()));
  }
  st.mean = std::accumulate(st.per_repeat.begin(), st.per_repeat.end(), 0.0) / static_cast<double>(repeats);
  return st;
}

inline EvalStats evaluate(const PolicyParams& p, const FeatureLayout& layout, const std::vector<Question>& testset,
                          const Env& env, int repeats = 3, double temperature = 0.6, std::uint64_t seed = 0,
                          const ContextMap* contexts = nullptr) {
  NeuralChooser chooser{&p, layout, temperature, contexts};
  return evaluate_with(chooser, testset, env, repeats, seed);
}

// ---------------------------------------------------------------------------
// Generalist pretraining

struct PretrainResult {
  PolicyParams params;
  double source_accuracy = 0.0;
  int epochs = 0;
};

inline constexpr std::int64_t kPretrainTrainIdBase = 2'000'000;
inline constexpr std::int64_t kPretrainValIdBase = 3'000'000;
inline constexpr std::int64_t kTestIdBase = 1'000'000;

inline Env task_env(const TaskSpec& spec, std::uint64_t seed) {
  Env env = Env::for_spec(spec);
  env.candidate_salt = derive_seed(seed, {0xE7});
  return env;
}

// Supervised training on oracle traces from the source domain, stopping at
// the first epoch whose validation accuracy reaches the target.
inline PretrainResult pretrain_vanilla(const TaskSpec& source, std::uint64_t seed, const PretrainConfig& cfg,
                                       const FeatureLayout& layout, int hidden = 32) {
  source.validate();
  const auto train = generate_dataset(source, cfg.train_size, derive_seed(seed, {0xA1}), kPretrainTrainIdBase);
  const auto val = generate_dataset(source, cfg.val_size, derive_seed(seed, {0xA2}), kPretrainValIdBase);
  const Env env = task_env(source, seed);
  SftConfig sft;
  sft.learning_rate = cfg.learning_rate;
  sft.batch_size = cfg.batch_size;
  sft.epochs = 1;
  sft.shuffle_seed = derive_seed(seed, {0xA3});
  const PolicyParams init = PolicyParams::random(PolicyDims::for_layout(layout, hidden), derive_seed(seed, {0xA0}));
  SftSession session(init, make_sft_examples(layout, train, env, oracle_traces(train)), sft);
  PretrainResult out;
  for (int e = 1; e <= cfg.max_epochs; ++e) {
    session.run_epoch();
    const double acc = evaluate(session.params(), layout, val, env, 1, 0.6, derive_seed(seed, {0xA4})).mean;
    if (acc >= cfg.target_accuracy) {
      out.params = session.params();
      out.source_accuracy = acc;
      out.epochs = e;
      return out;
    }
  }
  throw Error("pretraining did not reach source accuracy " + format_exact(cfg.target_accuracy) + " within " +
              std::to_string(cfg.max_epochs) + " epochs");
}

// Memoizes pretrained policies by (seed, source spec, pretrain config, layout).
class VanillaCache {
 public:
  const PretrainResult& get(const ExperimentConfig& cfg, std::uint64_t seed) {
    nlohmann::ordered_json key;
    key["seed"] = seed;
    key["source"] = task_spec_to_json(cfg.source);
    const auto full = experiment_config_to_json(cfg);
    key["pretrain"] = full["pretrain"];
    key["hidden"] = cfg.hidden;
    key["layout"] = {cfg.layout().value_bound, cfg.layout().operand_scale, cfg.layout().context_dim};
    const std::string k = key.dump();
    auto it = cache_.find(k);
    if (it == cache_.end()) it = cache_.emplace(k, pretrain_vanilla(cfg.source, seed, cfg.pretrain, cfg.layout(), cfg.hidden)).first;
    return it->second;
  }

 private:
  std::map<std::string, PretrainResult> cache_;
};

// ---------------------------------------------------------------------------
// Running a method

struct RlSummary {
  int iterations = 0;
  int episodes = 0;
  double mean_reward = 0.0;   // mean combined episode reward during training
  double mean_outcome = 0.0;  // mean outcome reward during training
  // Restricted to episodes with at least one correct step.
  int any_step_episodes = 0;
  double any_step_mean_reward = 0.0;
  double any_step_mean_outcome = 0.0;
  // Wrong-outcome episodes with at least one correct step, and the smallest
  // combined reward among them (0 when there are none).
  int failed_any_step_episodes = 0;
  double failed_any_step_min_reward = 0.0;
  bool operator==(const RlSummary&) const = default;
};

struct SeedMetrics {
  std::uint64_t seed = 0;
  std::vector<double> accuracies;  // one per evaluation repeat
  double source_accuracy = 0.0;    // of the shared vanilla policy
  int pool_size = 0;               // RL question pool (0 without RL)
  int synthesis_fallbacks = 0;
  int synthesis_records = 0;
  std::vector<double> sft_losses;
  RlSummary rl;
  bool operator==(const SeedMetrics&) const = default;
};

struct MetricsReport {
  std::string method;
  std::string task;
  std::string run_id;
  nlohmann::ordered_json config;
  std::vector<SeedMetrics> seeds;
  double mean = 0.0;
  double stddev = 0.0;
  std::map<std::string, double> timings;  // seconds per stage; not part of the metrics body

  void finalize() {
    std::vector<double> all;
    for (const auto& s : seeds) all.insert(all.end(), s.accuracies.begin(), s.accuracies.end());
    if (all.empty()) return;
    mean = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
    double var = 0.0;
    for (double a : all) var += (a - mean) * (a - mean);
    stddev = std::sqrt(var / static_cast<double>(all.size()));
  }

  // Equality of everything except timings.
  bool same_body(const MetricsReport& o) const {
    return method == o.method && task == o.task && run_id == o.run_id && config == o.config && seeds == o.seeds &&
           mean == o.mean && stddev == o.stddev;
  }
};

inline std::string task_name(const TaskSpec& t) {
  return std::string(to_string(t.domain)) + "-k" + std::to_string(t.num_steps);
}

// Train/test split of one seed. Train ids start at 0, test ids at kTestIdBase.
struct SeedData {
  std::vector<Question> train;  // max(train_size, sft_size) questions
  std::vector<Question> test;
};

inline SeedData make_seed_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedData d;
  const int n_train = std::max(cfg.train_size, cfg.sft_size);
  d.train = generate_dataset(cfg.target, n_train, derive_seed(seed, {0xB1}), 0);
  d.test = generate_dataset(cfg.target, cfg.test_size, derive_seed(seed, {0xB2}), kTestIdBase);
  return d;
}

namespace detail {

class StageTimer {
 public:
  StageTimer(std::map<std::string, double>& sink, std::string name)
      : sink_(sink), name_(std::move(name)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    sink_[name_] += std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  StageTimer(const StageTimer&) = delete;
  StageTimer& operator=(const StageTimer&) = delete;

 private:
  std::map<std::string, double>& sink_;
  std::string name_;
  std::chrono::steady_clock::time_point start_;
};

inline std::vector<Question> head(const std::vector<Question>& qs, int n) {
  return {qs.begin(), qs.begin() + std::min<std::ptrdiff_t>(n, static_cast<std::ptrdiff_t>(qs.size()))};
}

// A variant and its origin count as the same question for self-retrieval.
inline std::int64_t origin_of(const Question& q) { return q.provenance ? q.provenance->origin_id : q.id; }

inline ContextMap contexts_against(const RetrievalIndex& idx, const std::vector<Question>& qs, const IclConfig& icl,
                                   int value_bound) {
  ContextMap out;
  for (const auto& q : qs) {
    std::vector<Retrieved> hits;
    const std::int64_t self = origin_of(q);
    for (const auto& r : retrieve(idx, q.text, icl.k + 1, self)) hits.push_back(r);
    if (static_cast<int>(hits.size()) > icl.k) hits.resize(static_cast<std::size_t>(icl.k));
    out.emplace(q.id, icl_context(idx, hits, icl.k, value_bound));
  }
  return out;
}

}  // namespace detail

// Policies and artifacts produced while running one seed.
struct SeedRun {
  SeedMetrics metrics;
  PolicyParams final_policy;
  std::vector<EpisodeLog> episodes;
  std::vector<IterationMetrics> history;
};

inline int rl_iterations(const ExperimentConfig& cfg, std::size_t pool_size) {
  if (cfg.ppo.iterations > 0) return cfg.ppo.iterations;
  const double episodes = cfg.rl_passes * static_cast<double>(pool_size);
  return std::max(1, static_cast<int>(std::ceil(episodes / cfg.ppo.rollouts_per_iter)));
}

// Executes the method's stage list for one seed.
inline SeedRun run_seed(const ExperimentConfig& cfg, std::uint64_t seed, VanillaCache& cache,
                        std::map<std::string, double>& timings) {
  const FeatureLayout layout = cfg.layout();
  const Env env = task_env(cfg.target, seed);
  const SeedData data = make_seed_data(cfg, seed);
  const std::vector<Question> rl_base = detail::head(data.train, cfg.train_size);
  const std::vector<Question> sft_set = detail::head(data.train, cfg.sft_size > 0 ? cfg.sft_size : cfg.train_size);

  SeedRun run;
  run.metrics.seed = seed;
  PolicyParams policy;
  {
    detail::StageTimer t(timings, "pretrain");
    const PretrainResult& pre = cache.get(cfg, seed);
    policy = pre.params;
    run.metrics.source_accuracy = pre.source_accuracy;
  }

  std::optional<RetrievalIndex> index;
  ContextMap contexts;  // covers SFT questions, RL pool and test set once built
  ProcessDataset records;
  std::vector<Question> pool = rl_base;
  const auto ctx_ptr = [&](bool in_sft) -> const ContextMap* {
    if (!index) return nullptr;
    if (in_sft && !cfg.icl.consistent) return nullptr;
    return &contexts;
  };

  for (const Stage& stage : method_pipeline(cfg.method)) {
    detail::StageTimer t(timings, std::string(to_string(stage.kind)));
    switch (stage.kind) {
      case StageKind::icl_index: {
        index = build_index(rl_base, cfg.icl.dim);
        contexts = detail::contexts_against(*index, sft_set, cfg.icl, cfg.target.value_bound);
        break;
      }
      case StageKind::synthesize_self: {
        NeuralChooser chooser{&policy, layout, cfg.temperature, ctx_ptr(true)};
        SynthesisConfig sc = cfg.synthesis;
        sc.seed = derive_seed(seed, {0xC1});
        records = synthesize_traces(chooser, sft_set, env, sc);
        break;
      }
      case StageKind::synthesize_mismatched:
        records = synthesize_mismatched(cfg.mismatch_granularity, sft_set, env, derive_seed(seed, {0xC2}));
        break;
      case StageKind::sft: {
        SftConfig sc = cfg.sft;
        sc.shuffle_seed = derive_seed(seed, {0xC3, cfg.sft.shuffle_seed});
        auto res = sft_train(policy, layout, sft_set, env, records, sc, ctx_ptr(true));
        policy = std::move(res.params);
        run.metrics.sft_losses = std::move(res.epoch_losses);
        run.metrics.synthesis_records = static_cast<int>(records.size());
        run.metrics.synthesis_fallbacks =
            static_cast<int>(std::count_if(records.begin(), records.end(), [](const ProcessRecord& r) { return r.fallback; }));
        break;
      }
      case StageKind::augment: {
        AugmentConfig ac = cfg.augment;
        pool = augment_dataset(rl_base, ac, derive_seed(seed, {0xC4}));
        break;
      }
      case StageKind::rl: {
        if (index) {
          auto more = detail::contexts_against(*index, pool, cfg.icl, cfg.target.value_bound);
          contexts.merge(more);
        }
        RewardConfig rc = cfg.reward;
        if (stage.outcome_only) rc.alpha = 1.0;
        PpoConfig pc = cfg.ppo;
        pc.temperature = cfg.temperature;
        pc.iterations = rl_iterations(cfg, pool.size());
        pc.reference = policy;
        RftOptions opts;
        opts.contexts = index ? &contexts : nullptr;
        opts.log_episodes = true;
        auto res = train_rft(policy, pool, layout, env, rc, pc, derive_seed(seed, {0xC5}), opts);
        policy = std::move(res.params);
        RlSummary& s = run.metrics.rl;
        s.iterations = pc.iterations;
        s.episodes = static_cast<int>(res.episodes.size());
        for (const auto& e : res.episodes) {
          s.mean_reward += e.combined;
          s.mean_outcome += e.outcome;
          if (e.correct_steps > 0) {
            ++s.any_step_episodes;
            s.any_step_mean_reward += e.combined;
            s.any_step_mean_outcome += e.outcome;
            if (e.outcome == 0) {
              s.failed_any_step_min_reward = s.failed_any_step_episodes == 0
                                                 ? e.combined
                                                 : std::min(s.failed_any_step_min_reward, e.combined);
              ++s.failed_any_step_episodes;
            }
          }
        }
        if (s.episodes) {
          s.mean_reward /= s.episodes;
          s.mean_outcome /= s.episodes;
        }
        if (s.any_step_episodes) {
          s.any_step_mean_reward /= s.any_step_episodes;
          s.any_step_mean_outcome /= s.any_step_episodes;
        }
        run.metrics.pool_size = static_cast<int>(pool.size());
        run.episodes = std::move(res.episodes);
        run.history = std::move(res.history);
        break;
      }
    }
  }

  {
    detail::StageTimer t(timings, "evaluate");
    if (index) {
      auto test_ctx = detail::contexts_against(*index, data.test, cfg.icl, cfg.target.value_bound);
      contexts.merge(test_ctx);
    }
    const auto ev = evaluate(policy, layout, data.test, env, cfg.eval_repeats, cfg.temperature, derive_seed(seed, {0xD1}),
                             index ? &contexts : nullptr);
    run.metrics.accuracies = ev.per_repeat;
  }
  run.final_policy = std::move(policy);
  return run;
}

// Thrown when a stage fails; carries the seeds that completed.
class RunFailure : public Error {
 public:
  RunFailure(const std::string& what, MetricsReport partial, bool numeric)
      : Error(what), partial_(std::move(partial)), numeric_(numeric) {}
  const MetricsReport& partial() const { return partial_; }
  bool numeric() const { return numeric_; }

 private:
  MetricsReport partial_;
  bool numeric_;
};

inline MetricsReport run_method(const ExperimentConfig& cfg, VanillaCache& cache) {
  cfg.validate();
  MetricsReport rep;
  rep.method = std::string(to_string(cfg.method));
  rep.task = task_name(cfg.target);
  rep.run_id = run_id(cfg);
  rep.config = experiment_config_to_json(cfg);
  rep.config.erase("output_dir");
  for (std::uint64_t seed : cfg.seeds) {
    try {
      rep.seeds.push_back(run_seed(cfg, seed, cache, rep.timings).metrics);
    } catch (const Error& e) {
      rep.finalize();
      const bool numeric = dynamic_cast<const NumericError*>(&e) != nullptr;
      throw RunFailure(rep.method + " failed at seed " + std::to_string(seed) + ": " + e.what(), std::move(rep), numeric);
    }
  }
  rep.finalize();
  return rep;
}

inline MetricsReport run_method(const ExperimentConfig& cfg) {
  VanillaCache cache;
  return run_method(cfg, cache);
}

// ---------------------------------------------------------------------------
// Data-scale sweep

struct SweepRow {
  std::string method;
  int size = 0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
  bool operator==(const SweepRow&) const = default;
};

struct SweepTable {
  std::vector<SweepRow> rows;      // methods x sizes x seeds
  std::vector<SweepRow> baseline;  // SFT with sft_size samples, one row per seed
};

inline const std::vector<int> kDefaultSweepSizes = {25, 50, 100, 200, 400};
inline const std::vector<Method> kSweepMethods = {Method::reft, Method::sft_rl_prm, Method::sft_rl_prm_da};

// RL pools grow with the size; the SFT stage of the SFT-initialized methods
// always uses the first `sft_samples` training questions.
inline SweepTable data_scale_sweep(const ExperimentConfig& base, const std::vector<int>& sizes = kDefaultSweepSizes,
                                   int sft_samples = 100, VanillaCache* shared = nullptr) {
  VanillaCache local;
  VanillaCache& cache = shared ? *shared : local;
  SweepTable table;
  for (Method m : kSweepMethods) {
    for (int size : sizes) {
      ExperimentConfig cfg = base;
      cfg.method = m;
      cfg.train_size = size;
      cfg.sft_size = sft_samples;
      const auto rep = run_method(cfg, cache);
      for (const auto& s : rep.seeds) {
        const double acc = std::accumulate(s.accuracies.begin(), s.accuracies.end(), 0.0) / static_cast<double>(s.accuracies.size());
        table.rows.push_back({rep.method, size, s.seed, acc});
      }
    }
  }
  ExperimentConfig cfg = base;
  cfg.method = Method::sft;
  cfg.train_size = sft_samples;
  cfg.sft_size = sft_samples;
  const auto rep = run_method(cfg, cache);
  for (const auto& s : rep.seeds) {
    const double acc = std::accumulate(s.accuracies.begin(), s.accuracies.end(), 0.0) / static_cast<double>(s.accuracies.size());
    table.baseline.push_back({"sft", sft_samples, s.seed, acc});
  }
  return table;
}

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "method,size,seed,accuracy\n";
  for (const auto& r : rows)
    out += r.method + ',' + std::to_string(r.size) + ',' + std::to_string(r.seed) + ',' + format_exact(r.accuracy) + '\n';
  return out;
}

// Mean accuracy of `method` at `size` over all seeds in the table.
inline double sweep_mean(const SweepTable& t, std::string_view method, int size) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : t.rows)
    if (r.method == method && r.size == size) {
      sum += r.accuracy;
      ++n;
    }
  if (n == 0) throw ConfigError("sweep has no rows for " + std::string(method) + " at size " + std::to_string(size));
  return sum / n;
}

// ---------------------------------------------------------------------------
// Report files
//
//   metrics.jsonl  run header, one record per (seed, repeat), one per seed,
//                  then the summary. Excludes timings.
//   summary.txt    method x task table
//   accuracy.csv   method,seed,repeat,accuracy
//   timings.json   per-stage seconds

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot write " + p.string());
  f << content;
  if (!f) throw Error("failed writing " + p.string());
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw Error("cannot read " + p.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace detail

inline std::string metrics_jsonl(const MetricsReport& r) {
  std::string out;
  nlohmann::ordered_json head;
  head["type"] = "run";
  head["method"] = r.method;
  head["task"] = r.task;
  head["run_id"] = r.run_id;
  head["config"] = r.config;
  out += head.dump() + '\n';
  for (const auto& s : r.seeds) {
    for (std::size_t i = 0; i < s.accuracies.size(); ++i) {
      nlohmann::ordered_json j;
      j["type"] = "accuracy";
      j["method"] = r.method;
      j["seed"] = s.seed;
      j["repeat"] = i;
      j["accuracy"] = s.accuracies[i];
      out += j.dump() + '\n';
    }
  }
  for (const auto& s : r.seeds) {
    nlohmann::ordered_json j;
    j["type"] = "seed";
    j["seed"] = s.seed;
    j["source_accuracy"] = s.source_accuracy;
    j["pool_size"] = s.pool_size;
    j["synthesis_records"] = s.synthesis_records;
    j["synthesis_fallbacks"] = s.synthesis_fallbacks;
    j["sft_losses"] = s.sft_losses;
    nlohmann::ordered_json rl;
    rl["iterations"] = s.rl.iterations;
    rl["episodes"] = s.rl.episodes;
    rl["mean_reward"] = s.rl.mean_reward;
    rl["mean_outcome"] = s.rl.mean_outcome;
    rl["any_step_episodes"] = s.rl.any_step_episodes;
    rl["any_step_mean_reward"] = s.rl.any_step_mean_reward;
    rl["any_step_mean_outcome"] = s.rl.any_step_mean_outcome;
    rl["failed_any_step_episodes"] = s.rl.failed_any_step_episodes;
    rl["failed_any_step_min_reward"] = s.rl.failed_any_step_min_reward;
    j["rl"] = rl;
    out += j.dump() + '\n';
  }
  nlohmann::ordered_json sum;
  sum["type"] = "summary";
  sum["method"] = r.method;
  sum["mean"] = r.mean;
  sum["stddev"] = r.stddev;
  out += sum.dump() + '\n';
  return out;
}

inline MetricsReport parse_metrics_jsonl(std::string_view text) {
  MetricsReport r;
  std::map<std::uint64_t, std::size_t> slot;
  std::size_t pos = 0;
  try {
    while (pos < text.size()) {
      std::size_t end = text.find('\n', pos);
      if (end == std::string_view::npos) end = text.size();
      const std::string_view line = text.substr(pos, end - pos);
      pos = end + 1;
      if (line.empty()) continue;
      const auto j = nlohmann::ordered_json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "run") {
        r.method = j.at("method").get<std::string>();
        r.task = j.at("task").get<std::string>();
        r.run_id = j.at("run_id").get<std::string>();
        r.config = j.at("config");
      } else if (type == "accuracy") {
        const auto seed = j.at("seed").get<std::uint64_t>();
        auto it = slot.find(seed);
        if (it == slot.end()) {
          it = slot.emplace(seed, r.seeds.size()).first;
          r.seeds.push_back({});
          r.seeds.back().seed = seed;
        }
        r.seeds[it->second].accuracies.push_back(j.at("accuracy").get<double>());
      } else if (type == "seed") {
        const auto seed = j.at("seed").get<std::uint64_t>();
        auto it = slot.find(seed);
        if (it == slot.end()) {
          it = slot.emplace(seed, r.seeds.size()).first;
          r.seeds.push_back({});
          r.seeds.back().seed = seed;
        }
        SeedMetrics& s = r.seeds[it->second];
        s.source_accuracy = j.at("source_accuracy").get<double>();
        s.pool_size = j.at("pool_size").get<int>();
        s.synthesis_records = j.at("synthesis_records").get<int>();
        s.synthesis_fallbacks = j.at("synthesis_fallbacks").get<int>();
        s.sft_losses = j.at("sft_losses").get<std::vector<double>>();
        const auto& rl = j.at("rl");
        s.rl.iterations = rl.at("iterations").get<int>();
        s.rl.episodes = rl.at("episodes").get<int>();
        s.rl.mean_reward = rl.at("mean_reward").get<double>();
        s.rl.mean_outcome = rl.at("mean_outcome").get<double>();
        s.rl.any_step_episodes = rl.at("any_step_episodes").get<int>();
        s.rl.any_step_mean_reward = rl.at("any_step_mean_reward").get<double>();
        s.rl.any_step_mean_outcome = rl.at("any_step_mean_outcome").get<double>();
        s.rl.failed_any_step_episodes = rl.at("failed_any_step_episodes").get<int>();
        s.rl.failed_any_step_min_reward = rl.at("failed_any_step_min_reward").get<double>();
      } else if (type == "summary") {
        r.mean = j.at("mean").get<double>();
        r.stddev = j.at("stddev").get<double>();
      } else {
        throw FormatError("unknown metrics record type " + type);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed metrics file: ") + e.what());
  }
  return r;
}

inline std::string format_fixed(double x, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

// Methods as rows, tasks as columns, plus the row average.
inline std::string summary_table(const std::vector<MetricsReport>& reports) {
  std::vector<std::string> tasks;
  for (const auto& r : reports)
    if (std::find(tasks.begin(), tasks.end(), r.task) == tasks.end()) tasks.push_back(r.task);
  std::vector<std::string> methods;
  for (const auto& r : reports)
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
  std::size_t w = 6;
  for (const auto& m : methods) w = std::max(w, m.size());
  std::ostringstream out;
  auto pad = [](std::string s, std::size_t n) {
    s.resize(std::max(s.size(), n), ' ');
    return s;
  };
  out << pad("Method", w);
  for (const auto& t : tasks) out << "  " << pad(t, 9);
  out << "  Avg\n";
  for (const auto& m : methods) {
    out << pad(m, w);
    double sum = 0.0;
    int n = 0;
    for (const auto& t : tasks) {
      auto it = std::find_if(reports.begin(), reports.end(), [&](const MetricsReport& r) { return r.method == m && r.task == t; });
      if (it == reports.end()) {
        out << "  " << pad("-", 9);
        continue;
      }
      out << "  " << pad(format_fixed(it->mean) + " +- " + format_fixed(it->stddev), 9);
      sum += it->mean;
      ++n;
    }
    out << "  " << (n ? format_fixed(sum / n) : std::string("-")) << '\n';
  }
  return out.str();
}

inline std::string accuracy_csv(const MetricsReport& r) {
  std::string out = "method,seed,repeat,accuracy\n";
  for (const auto& s : r.seeds)
    for (std::size_t i = 0; i < s.accuracies.size(); ++i)
      out += r.method + ',' + std::to_string(s.seed) + ',' + std::to_string(i) + ',' + format_exact(s.accuracies[i]) + '\n';
  return out;
}

inline std::vector<std::filesystem::path> emit_report(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files = {dir / "metrics.jsonl", dir / "summary.txt", dir / "accuracy.csv",
                                              dir / "timings.json"};
  detail::write_file(files[0], metrics_jsonl(report));
  detail::write_file(files[1], summary_table({report}));
  detail::write_file(files[2], accuracy_csv(report));
  nlohmann::ordered_json t(report.timings);
  detail::write_file(files[3], t.dump(2) + '\n');
  return files;
}

inline MetricsReport load_report(const std::filesystem::path& dir) {
  MetricsReport r = parse_metrics_jsonl(detail::read_file(dir / "metrics.jsonl"));
  if (std::filesystem::exists(dir / "timings.json")) {
    const auto t = nlohmann::json::parse(detail::read_file(dir / "timings.json"));
    for (auto it = t.begin(); it != t.end(); ++it) r.timings[it.key()] = it.value().get<double>();
  }
  return r;
}

}  // namespace openrft
