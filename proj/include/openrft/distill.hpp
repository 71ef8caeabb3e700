#pragma once

// Reasoning-trace synthesis by rejection sampling, supervised fine-tuning on
// the synthesized traces, and the mismatched-granularity teacher.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "openrft/common.hpp"
#include "openrft/optim.hpp"
#include "openrft/policy.hpp"
#include "openrft/reward.hpp"
#include "openrft/task_env.hpp"

namespace openrft {

struct ProcessRecord {
  std::int64_t question_id = 0;
  std::vector<int> claims;
  char letter = 'A';
  int attempts_used = 0;
  bool fallback = false;
  bool operator==(const ProcessRecord&) const = default;
};

using ProcessDataset = std::vector<ProcessRecord>;

enum class Retention { first_success, best_by_prm };

struct SynthesisConfig {
  int max_attempts = 64;
  Retention retention = Retention::first_success;
  std::uint64_t seed = 0;
};

// Rolls out up to max_attempts episodes per question and keeps a trace whose
// extracted answer matches the gold letter. If none does, the record falls
// back to the bare gold answer with no steps. Retained traces may still
// contain wrong steps; only the final answer is checked.
template <ActionChooser C>
ProcessDataset synthesize_traces(const C& chooser, const std::vector<Question>& questions, const Env& env,
                                 const SynthesisConfig& cfg) {
  if (cfg.max_attempts < 1) throw ConfigError("max_attempts must be >= 1");
  ProcessDataset out;
  out.reserve(questions.size());
  for (const Question& q : questions) {
    ProcessRecord rec;
    rec.question_id = q.id;
    bool found = false;
    double best_prm = -1.0;
    int attempt = 0;
    while (attempt < cfg.max_attempts) {
      ++attempt;
      Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(q.id), static_cast<std::uint64_t>(attempt)}));
      const MdpState s = play_episode(chooser, q, env, rng);
      const auto letter = extract_answer(serialize_trace(q, s));
      if (!letter || outcome_reward(*letter, q.gold_letter) != 1) continue;
      if (cfg.retention == Retention::first_success) {
        rec.claims = s.claims;
        rec.letter = *letter;
        found = true;
        break;
      }
      double prm = 1.0;
      if (!s.claims.empty()) {
        std::vector<double> prs;
        for (std::size_t t = 0; t < s.claims.size(); ++t) prs.push_back(process_reward(q, static_cast<int>(t) + 1, s.claims[t]));
        prm = aggregate(prs, Aggregation::mean);
      }
      if (prm > best_prm) {
        best_prm = prm;
        rec.claims = s.claims;
        rec.letter = *letter;
        found = true;
      }
      if (prm == 1.0) break;
    }
    rec.attempts_used = attempt;
    if (!found) {
      rec.claims.clear();
      rec.letter = q.gold_letter;
      rec.fallback = true;
      rec.attempts_used = cfg.max_attempts;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

// Replays a record through the environment. Fallback records replay as a
// direct answer from the initial state.
inline MdpState replay_record(const Question& q, const Env& env, const ProcessRecord& rec) {
  if (rec.question_id != q.id) throw EnvError("record does not belong to this question");
  MdpState s = env.initial(q);
  if (rec.fallback) {
    Env direct = env;
    direct.answer_only = true;
    return direct.transition(q, s, rec.letter);
  }
  for (int c : rec.claims) s = env.transition(q, s, c);
  return env.transition(q, s, rec.letter);
}

// Teacher whose steps each merge g consecutive operations. Its claims
// w_g, w_2g, ..., w_k are projected onto the student's per-step candidate
// sets (nearest value, ties broken by a seeded coin); student steps past the
// teacher's last claim reuse that claim. The answer is always gold.
inline ProcessDataset synthesize_mismatched(int granularity, const std::vector<Question>& questions, const Env& env,
                                            std::uint64_t seed) {
  if (granularity < 1) throw ConfigError("teacher granularity must be >= 1");
  ProcessDataset out;
  out.reserve(questions.size());
  for (const Question& q : questions) {
    const int k = q.num_steps();
    std::vector<int> teacher;
    for (int t = granularity; t < k + granularity; t += granularity) teacher.push_back(q.value_at(std::min(t, k)));
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(q.id)}));
    ProcessRecord rec;
    rec.question_id = q.id;
    for (int t = 1; t <= k; ++t) {
      const int wanted = teacher[static_cast<std::size_t>(std::min<int>(t, static_cast<int>(teacher.size())) - 1)];
      const auto cands = env.candidates(q, t).candidates;
      int best = cands.front();
      std::int64_t best_d = -1;
      for (int c : cands) {
        const std::int64_t d = std::abs(static_cast<std::int64_t>(c) - wanted);
        if (best_d < 0 || d < best_d || (d == best_d && rng.uniform() < 0.5)) {
          best = c;
          best_d = d;
        }
      }
      rec.claims.push_back(best);
    }
    rec.letter = q.gold_letter;
    rec.attempts_used = 1;
    out.push_back(std::move(rec));
  }
  return out;
}

// Oracle teacher: gold steps and gold letter.
inline ProcessDataset oracle_traces(const std::vector<Question>& questions) {
  ProcessDataset out;
  out.reserve(questions.size());
  for (const Question& q : questions) out.push_back({q.id, q.intermediates, q.gold_letter, 1, false});
  return out;
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

// Precomputed per-action features of one record.
struct SftExample {
  std::vector<FeatureMatrix> features;
  std::vector<std::size_t> actions;
};

inline SftExample make_sft_example(const FeatureLayout& layout, const Question& q, const Env& env,
                                   const ProcessRecord& rec, const ContextBlock* ctx = nullptr) {
  if (rec.question_id != q.id) throw EnvError("record does not belong to this question");
  SftExample ex;
  MdpState s = env.initial(q);
  if (!rec.fallback) {
    for (int c : rec.claims) {
      const ActionSet a = env.actions(q, s);
      const int idx = a.index_of_value(c);
      if (idx < 0) throw EnvError("trace claim is not among the step candidates");
      ex.features.push_back(featurize_actions(layout, q, s, a, ctx));
      ex.actions.push_back(static_cast<std::size_t>(idx));
      s = env.transition(q, s, c);
    }
  }
  ActionSet answer;
  if (rec.fallback) {
    answer.phase = Phase::answer;
    answer.step_index = q.num_steps() + 1;
    answer.values.assign(q.options.begin(), q.options.end());
  } else {
    answer = env.actions(q, s);
    if (answer.phase != Phase::answer) throw EnvError("trace is shorter than the question");
  }
  const int li = letter_index(rec.letter);
  if (li < 0) throw EnvError("record letter is not A-D");
  ex.features.push_back(featurize_actions(layout, q, s, answer, ctx));
  ex.actions.push_back(static_cast<std::size_t>(li));
  return ex;
}

// Negative log-likelihood of every action in the example; adds
// weight * gradient into `grad` when nonempty. SFT scores at temperature 1.
inline double sft_example_loss(const PolicyParams& p, const SftExample& ex, std::span<double> grad = {},
                               double weight = 1.0) {
  double loss = 0.0;
  for (std::size_t i = 0; i < ex.features.size(); ++i)
    loss -= log_prob_from_features(p, ex.features[i], ex.actions[i], 1.0, grad, -weight);
  return loss;
}

inline double sft_loss(const PolicyParams& p, const FeatureLayout& layout, const Question& q, const Env& env,
                       const ProcessRecord& rec, const ContextBlock* ctx = nullptr) {
  return sft_example_loss(p, make_sft_example(layout, q, env, rec, ctx));
}

inline std::vector<double> sft_grad(const PolicyParams& p, const FeatureLayout& layout, const Question& q,
                                    const Env& env, const ProcessRecord& rec, const ContextBlock* ctx = nullptr) {
  std::vector<double> g(p.size(), 0.0);
  sft_example_loss(p, make_sft_example(layout, q, env, rec, ctx), g);
  return g;
}

// Defaults mirror batch 8 / 8 epochs; the learning rate is rescaled for a
// network of a few thousand parameters (5e-5 was used for LoRA on an 8B model).
struct SftConfig {
  double learning_rate = 1e-3;
  int epochs = 8;
  int batch_size = 8;
  std::uint64_t shuffle_seed = 0;
  OptimizerKind optimizer = OptimizerKind::adam;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("sft learning_rate must be positive");
    if (epochs < 1) throw ConfigError("sft epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("sft batch_size must be >= 1");
  }
};

struct SftResult {
  PolicyParams params;
  std::vector<double> epoch_losses;  // mean per-record loss seen during each epoch
  bool empty_dataset = false;
};

// Mini-batch descent on the mean per-record loss. The optimizer state lives
// in `Session`, so training can be resumed epoch by epoch.
class SftSession {
 public:
  SftSession(PolicyParams init, std::vector<SftExample> examples, const SftConfig& cfg)
      : params_(std::move(init)),
        examples_(std::move(examples)),
        cfg_(cfg),
        opt_(cfg.optimizer, params_.scorer_offset(), params_.scorer_size(), cfg.learning_rate),
        order_(examples_.size()) {
    cfg_.validate();
    std::iota(order_.begin(), order_.end(), std::size_t{0});
  }

  // One pass over the data; returns the mean loss.
  double run_epoch() {
    if (examples_.empty()) return 0.0;
    Rng rng(derive_seed(cfg_.shuffle_seed, {static_cast<std::uint64_t>(epoch_)}));
    rng.shuffle(order_);
    ++epoch_;
    std::vector<double> grad(params_.size());
    double total = 0.0;
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    for (std::size_t start = 0; start < order_.size(); start += bs) {
      const std::size_t end = std::min(order_.size(), start + bs);
      std::fill(grad.begin(), grad.end(), 0.0);
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = start; i < end; ++i) total += sft_example_loss(params_, examples_[order_[i]], grad, w);
      if (!all_finite(grad)) throw NumericError("non-finite SFT gradient");
      opt_.step(params_.flat(), grad);
    }
    return total / static_cast<double>(order_.size());
  }

  const PolicyParams& params() const { return params_; }
  PolicyParams take_params() { return std::move(params_); }

 private:
  PolicyParams params_;
  std::vector<SftExample> examples_;
  SftConfig cfg_;
  Optimizer opt_;
  std::vector<std::size_t> order_;
  int epoch_ = 0;
};

inline std::unordered_map<std::int64_t, const Question*> index_questions(const std::vector<Question>& qs) {
  std::unordered_map<std::int64_t, const Question*> m;
  for (const auto& q : qs) m.emplace(q.id, &q);
  return m;
}

inline std::vector<SftExample> make_sft_examples(const FeatureLayout& layout, const std::vector<Question>& questions,
                                                 const Env& env, const ProcessDataset& data,
                                                 const ContextMap* contexts = nullptr) {
  const auto by_id = index_questions(questions);
  std::vector<SftExample> out;
  out.reserve(data.size());
  for (const auto& rec : data) {
    auto it = by_id.find(rec.question_id);
    if (it == by_id.end()) throw ConfigError("record refers to unknown question " + std::to_string(rec.question_id));
    const ContextBlock* ctx = nullptr;
    if (contexts) {
      auto c = contexts->find(rec.question_id);
      if (c != contexts->end()) ctx = &c->second;
    }
    out.push_back(make_sft_example(layout, *it->second, env, rec, ctx));
  }
  return out;
}

inline SftResult sft_train(const PolicyParams& p, const FeatureLayout& layout, const std::vector<Question>& questions,
                           const Env& env, const ProcessDataset& data, const SftConfig& cfg,
                           const ContextMap* contexts = nullptr) {
  cfg.validate();
  SftResult result;
  if (data.empty()) {
    result.params = p;
    result.empty_dataset = true;
    return result;
  }
  SftSession session(p, make_sft_examples(layout, questions, env, data, contexts), cfg);
  for (int e = 0; e < cfg.epochs; ++e) result.epoch_losses.push_back(session.run_epoch());
  result.params = session.take_params();
  return result;
}

// ---------------------------------------------------------------------------
// Persistence: one JSON object per line with fields question_id, claims,
// letter, attempts_used, fallback.

inline std::string write_process_dataset(const ProcessDataset& d) {
  std::string out;
  for (const auto& r : d) {
    nlohmann::ordered_json j;
    j["question_id"] = r.question_id;
    j["claims"] = r.claims;
    j["letter"] = std::string(1, r.letter);
    j["attempts_used"] = r.attempts_used;
    j["fallback"] = r.fallback;
    out += j.dump() + '\n';
  }
  return out;
}

inline ProcessDataset read_process_dataset(std::string_view text) {
  ProcessDataset out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ProcessRecord r;
      r.question_id = j.at("question_id").get<std::int64_t>();
      r.claims = j.at("claims").get<std::vector<int>>();
      const auto letter = j.at("letter").get<std::string>();
      if (letter.size() != 1 || letter_index(letter[0]) < 0) throw FormatError("record letter must be A-D");
      r.letter = letter[0];
      r.attempts_used = j.at("attempts_used").get<int>();
      r.fallback = j.at("fallback").get<bool>();
      if (r.fallback && !r.claims.empty()) throw FormatError("fallback record with claims");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed process record: ") + e.what());
    }
  }
  return out;
}

}  // namespace openrft
