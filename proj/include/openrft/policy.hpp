#pragma once

// Step-scoring policy with a value head.
//
// Every candidate action is featurized independently and scored by a
// two-layer tanh network; the action distribution is the softmax of the
// scores divided by a temperature. A second two-layer network maps the
// state features (candidate slots zeroed) to a value estimate.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "openrft/common.hpp"
#include "openrft/task_env.hpp"

namespace openrft {

// Retrieval summary appended to every feature vector. An empty `values`
// vector stands for the all-zero block.
struct ContextBlock {
  std::vector<double> values;
  bool operator==(const ContextBlock&) const = default;
};

using ContextMap = std::unordered_map<std::int64_t, ContextBlock>;

// Feature vector layout:
//   [0]      current value / value_bound
//   [1]      candidate value / value_bound
//   [2..5]   one-hot phase: next op add, sub, mul, or final answer
//   [6]      next operand / operand_scale (0 in the answer phase)
//   [7]      step index t / k
//   [8..10]  exp(-|candidate - apply(kind, current, operand)|) for add, sub, mul
//            (0 in the answer phase)
//   [11]     exp(-|candidate - current|)
//   [12..]   context block (zeros when absent)
struct FeatureLayout {
  static constexpr int kClaim = 0;
  static constexpr int kCandidate = 1;
  static constexpr int kPhase = 2;
  static constexpr int kOperand = 6;
  static constexpr int kStep = 7;
  static constexpr int kMatch = 8;
  static constexpr int kSame = 11;
  static constexpr int kContext = 12;

  int value_bound = 1000;
  int operand_scale = 9;
  int context_dim = 64 + 3;

  int size() const { return kContext + context_dim; }
  bool operator==(const FeatureLayout&) const = default;
};

namespace detail {

inline double clamp_unit(double x) { return std::clamp(x, -1.0, 1.0); }
inline double match(std::int64_t diff) { return std::exp(-std::abs(static_cast<double>(diff))); }

inline void fill_state_slots(const FeatureLayout& layout, const Question& q, const MdpState& s, Phase phase,
                             const ContextBlock* ctx, std::span<double> out) {
  std::fill(out.begin(), out.end(), 0.0);
  const int current = s.current_value(q);
  out[FeatureLayout::kClaim] = clamp_unit(static_cast<double>(current) / layout.value_bound);
  const int t = s.step_index();
  const int k = std::max(q.num_steps(), 1);
  out[FeatureLayout::kStep] = clamp_unit(static_cast<double>(t) / k);
  if (phase == Phase::answer) {
    out[FeatureLayout::kPhase + 3] = 1.0;
  } else {
    const Op& op = q.ops.at(static_cast<std::size_t>(t));
    out[FeatureLayout::kPhase + static_cast<int>(op.kind)] = 1.0;
    out[FeatureLayout::kOperand] = clamp_unit(static_cast<double>(op.operand) / layout.operand_scale);
  }
  if (ctx && !ctx->values.empty()) {
    if (static_cast<int>(ctx->values.size()) != layout.context_dim)
      throw ConfigError("context block length differs from the feature layout");
    for (int i = 0; i < layout.context_dim; ++i)
      out[static_cast<std::size_t>(FeatureLayout::kContext + i)] = clamp_unit(ctx->values[static_cast<std::size_t>(i)]);
  }
}

inline void fill_candidate_slots(const FeatureLayout& layout, const Question& q, const MdpState& s, Phase phase,
                                 int candidate, std::span<double> out) {
  const int current = s.current_value(q);
  out[FeatureLayout::kCandidate] = clamp_unit(static_cast<double>(candidate) / layout.value_bound);
  if (phase == Phase::step) {
    const Op& op = q.ops.at(static_cast<std::size_t>(s.step_index()));
    for (OpKind kind : {OpKind::add, OpKind::sub, OpKind::mul})
      out[FeatureLayout::kMatch + static_cast<int>(kind)] = match(candidate - apply_op(kind, current, op.operand));
  }
  out[FeatureLayout::kSame] = match(static_cast<std::int64_t>(candidate) - current);
}

}  // namespace detail

inline std::vector<double> featurize(const FeatureLayout& layout, const Question& q, const MdpState& s, Phase phase,
                                     int candidate, const ContextBlock* ctx = nullptr) {
  if (s.terminal()) throw EnvError("featurize: terminal state");
  std::vector<double> x(static_cast<std::size_t>(layout.size()));
  detail::fill_state_slots(layout, q, s, phase, ctx, x);
  detail::fill_candidate_slots(layout, q, s, phase, candidate, x);
  return x;
}

inline std::vector<double> state_features(const FeatureLayout& layout, const Question& q, const MdpState& s,
                                          Phase phase, const ContextBlock* ctx = nullptr) {
  if (s.terminal()) throw EnvError("state_features: terminal state");
  std::vector<double> x(static_cast<std::size_t>(layout.size()));
  detail::fill_state_slots(layout, q, s, phase, ctx, x);
  return x;
}

// Row-major (candidates x features) feature matrix.
struct FeatureMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(cols), static_cast<std::size_t>(cols)};
  }
};

inline FeatureMatrix featurize_actions(const FeatureLayout& layout, const Question& q, const MdpState& s,
                                       const ActionSet& actions, const ContextBlock* ctx = nullptr) {
  if (s.terminal()) throw EnvError("featurize: terminal state");
  FeatureMatrix m;
  m.rows = static_cast<int>(actions.size());
  m.cols = layout.size();
  m.data.assign(static_cast<std::size_t>(m.rows) * static_cast<std::size_t>(m.cols), 0.0);
  std::vector<double> base(static_cast<std::size_t>(m.cols));
  detail::fill_state_slots(layout, q, s, actions.phase, ctx, base);
  for (int i = 0; i < m.rows; ++i) {
    std::span<double> r(m.data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(m.cols),
                        static_cast<std::size_t>(m.cols));
    std::copy(base.begin(), base.end(), r.begin());
    detail::fill_candidate_slots(layout, q, s, actions.phase, actions.values[static_cast<std::size_t>(i)], r);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Parameters

struct PolicyDims {
  int features = 0;
  int state_features = 0;
  int hidden = 32;
  bool operator==(const PolicyDims&) const = default;

  static PolicyDims for_layout(const FeatureLayout& layout, int hidden = 32) {
    return {layout.size(), layout.size(), hidden};
  }
};

// Flat parameter vector with named views. Layout, in order:
//   scorer.w1 (features x hidden, input-major: entry (h, j) at j * hidden + h)
//   scorer.b1 (hidden), scorer.w2 (hidden), scorer.b2 (1),
//   value.w1 (state_features x hidden, input-major), value.b1, value.w2, value.b2.
class PolicyParams {
 public:
  PolicyParams() = default;

  explicit PolicyParams(PolicyDims dims) : dims_(dims) {
    if (dims.features < 1 || dims.state_features < 1 || dims.hidden < 1) throw ConfigError("policy dims must be positive");
    theta_.assign(count(dims), 0.0);
  }

  static std::size_t net_size(int in, int hidden) {
    return static_cast<std::size_t>(in) * static_cast<std::size_t>(hidden) + 2 * static_cast<std::size_t>(hidden) + 1;
  }
  static std::size_t count(PolicyDims d) { return net_size(d.features, d.hidden) + net_size(d.state_features, d.hidden); }

  static PolicyParams random(PolicyDims dims, std::uint64_t seed, double scale = 0.05) {
    PolicyParams p(dims);
    Rng rng(derive_seed(seed, {0x9A}));
    for (double& x : p.theta_) x = rng.uniform(-scale, scale);
    return p;
  }

  static PolicyParams unflatten(PolicyDims dims, std::vector<double> flat) {
    PolicyParams p(dims);
    if (flat.size() != p.theta_.size()) throw ConfigError("flat parameter vector has the wrong length");
    p.theta_ = std::move(flat);
    return p;
  }

  std::vector<double> flatten() const { return theta_; }

  const PolicyDims& dims() const { return dims_; }
  std::size_t size() const { return theta_.size(); }
  std::span<double> flat() { return theta_; }
  std::span<const double> flat() const { return theta_; }

  std::size_t scorer_offset() const { return 0; }
  std::size_t scorer_size() const { return net_size(dims_.features, dims_.hidden); }
  std::size_t value_offset() const { return scorer_size(); }
  std::size_t value_size() const { return net_size(dims_.state_features, dims_.hidden); }

  bool operator==(const PolicyParams&) const = default;

 private:
  PolicyDims dims_;
  std::vector<double> theta_;
};

namespace detail {

// Two-layer tanh network stored at `offset` in the flat vector:
// out = w2 . tanh(W1 x + b1) + b2.
struct NetView {
  std::span<const double> theta;
  std::size_t offset;
  int in;
  int hidden;

  const double* w1() const { return theta.data() + offset; }
  const double* b1() const { return w1() + static_cast<std::size_t>(in) * static_cast<std::size_t>(hidden); }
  const double* w2() const { return b1() + hidden; }
  double b2() const { return w2()[hidden]; }

  // Writes the hidden activations into `h` and returns the output.
  double forward(std::span<const double> x, std::span<double> h) const {
    const double* b = b1();
    std::copy(b, b + hidden, h.begin());
    const double* w = w1();
    for (int j = 0; j < in; ++j) {
      const double xj = x[static_cast<std::size_t>(j)];
      if (xj == 0.0) continue;
      const double* col = w + static_cast<std::size_t>(j) * static_cast<std::size_t>(hidden);
      for (int i = 0; i < hidden; ++i) h[static_cast<std::size_t>(i)] += col[i] * xj;
    }
    const double* v = w2();
    double out = b2();
    for (int i = 0; i < hidden; ++i) {
      h[static_cast<std::size_t>(i)] = std::tanh(h[static_cast<std::size_t>(i)]);
      out += v[i] * h[static_cast<std::size_t>(i)];
    }
    return out;
  }

  // grad += coef * d(out)/d(theta) at input x with hidden activations h.
  void accumulate_grad(std::span<const double> x, std::span<const double> h, double coef, std::span<double> grad) const {
    if (coef == 0.0) return;
    double* g = grad.data() + offset;
    const std::size_t nw1 = static_cast<std::size_t>(in) * static_cast<std::size_t>(hidden);
    double* gb1 = g + nw1;
    double* gw2 = gb1 + hidden;
    const double* v = w2();
    thread_local std::vector<double> dpre;
    dpre.resize(static_cast<std::size_t>(hidden));
    for (int i = 0; i < hidden; ++i) {
      const double hi = h[static_cast<std::size_t>(i)];
      gw2[i] += coef * hi;
      dpre[static_cast<std::size_t>(i)] = coef * v[i] * (1.0 - hi * hi);
      gb1[i] += dpre[static_cast<std::size_t>(i)];
    }
    gw2[hidden] += coef;
    for (int j = 0; j < in; ++j) {
      const double xj = x[static_cast<std::size_t>(j)];
      if (xj == 0.0) continue;
      double* col = g + static_cast<std::size_t>(j) * static_cast<std::size_t>(hidden);
      for (int i = 0; i < hidden; ++i) col[i] += dpre[static_cast<std::size_t>(i)] * xj;
    }
  }
};

inline NetView scorer_net(const PolicyParams& p) {
  return {p.flat(), p.scorer_offset(), p.dims().features, p.dims().hidden};
}
inline NetView value_net(const PolicyParams& p) {
  return {p.flat(), p.value_offset(), p.dims().state_features, p.dims().hidden};
}

[[noreturn]] inline void throw_non_finite(const PolicyParams& p, std::string_view what) {
  std::ostringstream msg;
  msg << "non-finite " << what;
  int listed = 0;
  const auto flat = p.flat();
  for (std::size_t i = 0; i < flat.size(); ++i) {
    if (std::isfinite(flat[i])) continue;
    if (listed == 0) msg << "; non-finite parameters at flat indices:";
    if (listed < 16) msg << ' ' << i;
    ++listed;
  }
  if (listed > 16) msg << " ... (" << listed << " total)";
  if (listed == 0) msg << "; all parameters finite (inputs or overflow)";
  throw NumericError(msg.str());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scoring and distributions

struct ActionDistribution {
  std::vector<int> candidates;
  std::vector<double> probs;
  std::vector<double> log_probs;
  double temperature = 1.0;
};

// Candidate logits (pre-temperature). Optionally keeps per-row hidden
// activations for gradient computation.
inline std::vector<double> scorer_logits(const PolicyParams& p, const FeatureMatrix& feats,
                                         std::vector<double>* hidden_out = nullptr) {
  if (feats.cols != p.dims().features) throw ConfigError("feature width differs from policy dims");
  const auto net = detail::scorer_net(p);
  const auto H = static_cast<std::size_t>(p.dims().hidden);
  std::vector<double> local;
  std::vector<double>& hs = hidden_out ? *hidden_out : local;
  hs.assign(static_cast<std::size_t>(feats.rows) * H, 0.0);
  std::vector<double> logits(static_cast<std::size_t>(feats.rows));
  for (int i = 0; i < feats.rows; ++i)
    logits[static_cast<std::size_t>(i)] = net.forward(feats.row(i), std::span<double>(hs.data() + static_cast<std::size_t>(i) * H, H));
  if (!all_finite(logits)) detail::throw_non_finite(p, "logits");
  return logits;
}

// Softmax of logits / temperature (max-shifted).
inline void softmax_into(std::span<const double> logits, double temperature, std::vector<double>& probs,
                         std::vector<double>& log_probs) {
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (logits.empty()) throw ConfigError("softmax over an empty candidate set");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  probs.resize(logits.size());
  log_probs.resize(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    log_probs[i] = (logits[i] - mx) / temperature;
    z += std::exp(log_probs[i]);
  }
  const double lz = std::log(z);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    log_probs[i] -= lz;
    probs[i] = std::exp(log_probs[i]);
  }
}

inline ActionDistribution distribution_from_logits(std::vector<int> candidates, std::span<const double> logits,
                                                   double temperature) {
  ActionDistribution d;
  d.candidates = std::move(candidates);
  d.temperature = temperature;
  softmax_into(logits, temperature, d.probs, d.log_probs);
  return d;
}

inline ActionDistribution action_distribution(const PolicyParams& p, const FeatureLayout& layout, const Question& q,
                                              const MdpState& s, const ActionSet& actions, double temperature,
                                              const ContextBlock* ctx = nullptr) {
  const auto feats = featurize_actions(layout, q, s, actions, ctx);
  const auto logits = scorer_logits(p, feats);
  return distribution_from_logits(actions.values, logits, temperature);
}

struct SampledAction {
  std::size_t index = 0;
  double log_prob = 0.0;
};

// Inverse CDF over the candidate order.
inline SampledAction sample_action(const ActionDistribution& dist, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t pick = dist.probs.size() - 1;
  for (std::size_t i = 0; i < dist.probs.size(); ++i) {
    acc += dist.probs[i];
    if (u < acc) {
      pick = i;
      break;
    }
  }
  // Rounding can leave acc slightly below 1; never land on a zero-probability tail.
  while (dist.probs[pick] == 0.0 && pick > 0) --pick;
  return {pick, dist.log_probs[pick]};
}

inline SampledAction sample_action(const ActionDistribution& dist, std::uint64_t seed) {
  Rng rng(seed);
  return sample_action(dist, rng);
}

// log pi(action | state) from precomputed features. When `grad` is nonempty,
// adds weight * d(log pi)/d(theta) into it.
inline double log_prob_from_features(const PolicyParams& p, const FeatureMatrix& feats, std::size_t action,
                                     double temperature, std::span<double> grad = {}, double weight = 1.0) {
  std::vector<double> hs;
  const auto logits = scorer_logits(p, feats, grad.empty() ? nullptr : &hs);
  std::vector<double> probs, lps;
  softmax_into(logits, temperature, probs, lps);
  if (!grad.empty() && weight != 0.0) {
    const auto net = detail::scorer_net(p);
    const auto H = static_cast<std::size_t>(p.dims().hidden);
    for (int i = 0; i < feats.rows; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      const double coef = weight * ((ui == action ? 1.0 : 0.0) - probs[ui]) / temperature;
      net.accumulate_grad(feats.row(i), std::span<const double>(hs.data() + ui * H, H), coef, grad);
    }
  }
  return lps.at(action);
}

inline double log_prob(const PolicyParams& p, const FeatureLayout& layout, const Question& q, const MdpState& s,
                       const ActionSet& actions, std::size_t action, double temperature,
                       const ContextBlock* ctx = nullptr) {
  return log_prob_from_features(p, featurize_actions(layout, q, s, actions, ctx), action, temperature);
}

inline std::vector<double> grad_log_prob(const PolicyParams& p, const FeatureLayout& layout, const Question& q,
                                         const MdpState& s, const ActionSet& actions, std::size_t action,
                                         double temperature, const ContextBlock* ctx = nullptr) {
  std::vector<double> g(p.size(), 0.0);
  log_prob_from_features(p, featurize_actions(layout, q, s, actions, ctx), action, temperature, g);
  return g;
}

inline double value_from_features(const PolicyParams& p, std::span<const double> x, std::span<double> grad = {},
                                  double weight = 1.0) {
  if (static_cast<int>(x.size()) != p.dims().state_features) throw ConfigError("state feature width differs from policy dims");
  const auto net = detail::value_net(p);
  std::vector<double> h(static_cast<std::size_t>(p.dims().hidden));
  const double v = net.forward(x, h);
  if (!std::isfinite(v)) detail::throw_non_finite(p, "value");
  if (!grad.empty()) net.accumulate_grad(x, h, weight, grad);
  return v;
}

inline double value(const PolicyParams& p, const FeatureLayout& layout, const Question& q, const MdpState& s,
                    Phase phase, const ContextBlock* ctx = nullptr) {
  return value_from_features(p, state_features(layout, q, s, phase, ctx));
}

inline std::vector<double> grad_value(const PolicyParams& p, const FeatureLayout& layout, const Question& q,
                                      const MdpState& s, Phase phase, const ContextBlock* ctx = nullptr) {
  std::vector<double> g(p.size(), 0.0);
  value_from_features(p, state_features(layout, q, s, phase, ctx), g);
  return g;
}

// ---------------------------------------------------------------------------
// Action choosers. Anything that can pick an action in a state; the learned
// policy is one, test oracles are others.

template <typename C>
concept ActionChooser = requires(const C& c, const Question& q, const MdpState& s, const ActionSet& a, Rng& rng) {
  { c.choose(q, s, a, rng) } -> std::same_as<SampledAction>;
};

struct NeuralChooser {
  const PolicyParams* params = nullptr;
  FeatureLayout layout;
  double temperature = 0.6;
  const ContextMap* contexts = nullptr;

  const ContextBlock* context_for(const Question& q) const {
    if (!contexts) return nullptr;
    auto it = contexts->find(q.id);
    return it == contexts->end() ? nullptr : &it->second;
  }

  SampledAction choose(const Question& q, const MdpState& s, const ActionSet& a, Rng& rng) const {
    return sample_action(action_distribution(*params, layout, q, s, a, temperature, context_for(q)), rng);
  }
};

// Plays one episode from the initial state. `max_actions` below the episode
// length truncates it (the trace then has no answer line).
template <ActionChooser C>
MdpState play_episode(const C& chooser, const Question& q, const Env& env, Rng& rng, int max_actions = -1) {
  MdpState s = env.initial(q);
  const int cap = max_actions < 0 ? env.max_actions(q) : std::min(max_actions, env.max_actions(q));
  for (int i = 0; i < cap && !s.terminal(); ++i) {
    const ActionSet a = env.actions(q, s);
    const SampledAction pick = chooser.choose(q, s, a, rng);
    s = env.transition(q, s, env.action_at(a, pick.index));
  }
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints. Decimal text, one value per line, %.17g so every double
// round-trips exactly:
//   openrft-policy 1
//   dims <features> <state_features> <hidden>
//   params <count>
//   <value>...

inline std::string save_checkpoint(const PolicyParams& p) {
  std::string out = "openrft-policy 1\n";
  out += "dims " + std::to_string(p.dims().features) + ' ' + std::to_string(p.dims().state_features) + ' ' +
         std::to_string(p.dims().hidden) + '\n';
  out += "params " + std::to_string(p.size()) + '\n';
  for (double x : p.flat()) out += format_exact(x) + '\n';
  return out;
}

inline PolicyParams load_checkpoint(const std::string& text, std::optional<PolicyDims> expected = std::nullopt) {
  std::istringstream in(text);
  std::string magic;
  int version = 0;
  if (!(in >> magic >> version) || magic != "openrft-policy") throw FormatError("not a policy checkpoint");
  if (version != 1) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  std::string tag;
  PolicyDims d;
  if (!(in >> tag >> d.features >> d.state_features >> d.hidden) || tag != "dims") throw FormatError("checkpoint: bad dims line");
  if (expected && *expected != d) throw FormatError("checkpoint dims do not match the expected policy dims");
  std::size_t n = 0;
  if (!(in >> tag >> n) || tag != "params") throw FormatError("checkpoint: bad params line");
  PolicyDims check = d;
  if (d.features < 1 || d.state_features < 1 || d.hidden < 1 || n != PolicyParams::count(check))
    throw FormatError("checkpoint: parameter count does not match dims");
  std::vector<double> flat(n);
  std::string tok;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(in >> tok)) throw FormatError("checkpoint: truncated parameter list");
    char* end = nullptr;
    flat[i] = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw FormatError("checkpoint: bad number '" + tok + "'");
  }
  if (in >> tok) throw FormatError("checkpoint: trailing data");
  if (!all_finite(flat)) throw FormatError("checkpoint: non-finite parameter");
  return PolicyParams::unflatten(d, std::move(flat));
}

}  // namespace openrft
