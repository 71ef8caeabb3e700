#pragma once

// ChainArith: synthetic multi-step multiple-choice arithmetic questions and
// the step-by-step decision process built on top of them.
//
// A question starts from a value v0 and applies k operations. Each reasoning
// step claims one intermediate value, chosen from a small candidate set that
// contains the correct intermediate exactly once. The last action picks one
// of four lettered options. Every action appends one newline-terminated line
// to the trace.

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "openrft/common.hpp"

namespace openrft {

enum class OpKind : std::uint8_t { add, sub, mul };
enum class Domain : std::uint8_t { source, target };

inline constexpr int kNumOptions = 4;
inline constexpr int kMaxGenerationAttempts = 1000;

inline std::string_view to_string(OpKind k) {
  switch (k) {
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
  }
  return "?";
}

inline OpKind parse_op_kind(std::string_view s) {
  if (s == "add") return OpKind::add;
  if (s == "sub") return OpKind::sub;
  if (s == "mul") return OpKind::mul;
  throw FormatError("unknown op kind: " + std::string(s));
}

inline std::string_view to_string(Domain d) { return d == Domain::source ? "source" : "target"; }

inline Domain parse_domain(std::string_view s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw FormatError("unknown domain tag: " + std::string(s));
}

// Operation kinds that occur in a domain. The source domain has no
// multiplication; that gap is what the target domain tests.
inline std::vector<OpKind> domain_op_kinds(Domain d) {
  if (d == Domain::source) return {OpKind::add, OpKind::sub};
  return {OpKind::add, OpKind::sub, OpKind::mul};
}

inline constexpr std::int64_t apply_op(OpKind kind, std::int64_t value, std::int64_t operand) noexcept {
  switch (kind) {
    case OpKind::add: return value + operand;
    case OpKind::sub: return value - operand;
    case OpKind::mul: return value * operand;
  }
  return value;
}

struct Op {
  OpKind kind = OpKind::add;
  int operand = 0;
  bool operator==(const Op&) const = default;
};

inline char letter_of(int index) { return static_cast<char>('A' + index); }

// Uppercases and maps A..D to 0..3; -1 for anything else.
inline int letter_index(char letter) {
  if (letter >= 'a' && letter <= 'z') letter = static_cast<char>(letter - 'a' + 'A');
  const int i = letter - 'A';
  return (i >= 0 && i < kNumOptions) ? i : -1;
}

struct TaskSpec {
  int num_steps = 4;
  std::vector<OpKind> op_kinds = {OpKind::add, OpKind::sub, OpKind::mul};
  int operand_min = 2;
  int operand_max = 9;
  int start_min = 0;
  int start_max = 20;
  int num_options = kNumOptions;
  int num_candidates = 4;
  int value_bound = 1000;
  Domain domain = Domain::target;

  static TaskSpec source(int k = 4) {
    TaskSpec s;
    s.num_steps = k;
    s.op_kinds = domain_op_kinds(Domain::source);
    s.domain = Domain::source;
    return s;
  }

  static TaskSpec target(int k = 4) {
    TaskSpec s;
    s.num_steps = k;
    s.domain = Domain::target;
    return s;
  }

  void validate() const {
    if (num_steps < 1 || num_steps > 6) throw ConfigError("num_steps must be in [1, 6]");
    if (op_kinds.empty()) throw ConfigError("op_kinds must be nonempty");
    if (domain == Domain::source &&
        std::find(op_kinds.begin(), op_kinds.end(), OpKind::mul) != op_kinds.end())
      throw ConfigError("source domain uses add/sub only");
    if (operand_min > operand_max) throw ConfigError("empty operand range");
    if (start_min > start_max) throw ConfigError("empty start range");
    if (num_options != kNumOptions) throw ConfigError("num_options must be 4");
    if (num_candidates < 2) throw ConfigError("num_candidates must be >= 2");
    if (value_bound < 1) throw ConfigError("value_bound must be positive");
  }

  bool operator==(const TaskSpec&) const = default;
};

// Augmentation lineage of a question variant.
struct Provenance {
  std::int64_t origin_id = 0;
  int variant_index = 0;
  // permutation[i] = new letter index of the original option i.
  std::array<int, kNumOptions> permutation = {0, 1, 2, 3};
  // An option value was deliberately perturbed; the gold option may no longer
  // equal the last intermediate.
  bool corrupted = false;
  bool operator==(const Provenance&) const = default;
};

struct Question {
  std::int64_t id = 0;
  std::string text;
  int v0 = 0;
  std::vector<Op> ops;
  std::vector<int> intermediates;
  std::array<int, kNumOptions> options = {};
  char gold_letter = 'A';
  Domain domain = Domain::target;
  std::optional<Provenance> provenance;

  int num_steps() const { return static_cast<int>(ops.size()); }
  int gold_index() const { return letter_index(gold_letter); }
  int gold_value() const { return options[static_cast<std::size_t>(gold_index())]; }
  // w_t for t in [0, k]; w_0 = v0.
  int value_at(int t) const { return t == 0 ? v0 : intermediates[static_cast<std::size_t>(t - 1)]; }

  bool operator==(const Question&) const = default;
};

// ---------------------------------------------------------------------------
// Question text templates. Index 0 is the canonical phrasing; the augmenter
// renders variants with the other indices. All templates carry the same
// numeric content.

inline constexpr int kNumTextTemplates = 8;

namespace detail {

inline std::string op_phrase(const Op& op, int style) {
  const std::string n = std::to_string(op.operand);
  switch (op.kind) {
    case OpKind::add:
      switch (style % 4) {
        case 0: return "add " + n;
        case 1: return "increase it by " + n;
        case 2: return "plus " + n;
        default: return "raise the value by " + n;
      }
    case OpKind::sub:
      switch (style % 4) {
        case 0: return "subtract " + n;
        case 1: return "decrease it by " + n;
        case 2: return "minus " + n;
        default: return "take away " + n;
      }
    case OpKind::mul:
      switch (style % 4) {
        case 0: return "multiply by " + n;
        case 1: return "scale it by " + n;
        case 2: return "times " + n;
        default: return "multiply the value by " + n;
      }
  }
  return {};
}

inline std::string join_ops(const std::vector<Op>& ops, int style, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < ops.size(); ++i) {
    if (i) out += sep;
    out += op_phrase(ops[i], style);
  }
  return out;
}

}  // namespace detail

inline std::string render_question_text(int v0, const std::vector<Op>& ops, int template_index) {
  const std::string s = std::to_string(v0);
  switch (template_index) {
    case 0: return "Start with " + s + ". Then " + detail::join_ops(ops, 0, ", then ") + ". What is the final value?";
    case 1: return "Begin from " + s + "; " + detail::join_ops(ops, 1, "; ") + ". Which value results?";
    case 2: return "Take " + s + " and " + detail::join_ops(ops, 2, ", ") + ". What do you get?";
    case 3: return "A number starts at " + s + ". In order: " + detail::join_ops(ops, 3, ", ") + ". Find the resulting number.";
    case 4: return "Compute the result of starting at " + s + " and applying: " + detail::join_ops(ops, 0, "; ") + ".";
    case 5: return "Let x be " + s + ". Successively " + detail::join_ops(ops, 1, ", and then ") + ". What is x at the end?";
    case 6: return "Initial value " + s + ". Steps: " + detail::join_ops(ops, 2, " / ") + ". Report the outcome.";
    case 7: return "From " + s + ", " + detail::join_ops(ops, 3, ", next ") + ". Which option equals the final number?";
    default: throw ConfigError("text template index out of range");
  }
}

// ---------------------------------------------------------------------------
// Generation

inline std::optional<std::vector<int>> run_chain(std::int64_t v0, const std::vector<Op>& ops, int bound) {
  std::vector<int> out;
  out.reserve(ops.size());
  std::int64_t v = v0;
  for (const Op& op : ops) {
    v = apply_op(op.kind, v, op.operand);
    if (v > bound || v < -bound) return std::nullopt;
    out.push_back(static_cast<int>(v));
  }
  return out;
}

namespace detail {

inline bool contains(const std::vector<int>& xs, int x) { return std::find(xs.begin(), xs.end(), x) != xs.end(); }

// Appends rejected-if-duplicate perturbations gold+1, gold-1, gold+2, ... until
// `out` holds `wanted` values besides `gold`.
inline void top_up(std::vector<int>& out, int gold, std::size_t wanted, int bound) {
  for (int d = 1; out.size() < wanted; ++d) {
    for (int v : {gold + d, gold - d}) {
      if (out.size() >= wanted) break;
      if (v != gold && v <= bound && v >= -bound && !contains(out, v)) out.push_back(v);
    }
  }
}

}  // namespace detail

// Builds a question from a fixed chain. Options are the gold value plus three
// distinct wrong finals obtained by single-fault corruptions of the chain:
// skipping one op, swapping one op's kind, or shifting one operand by one.
inline Question make_question(const TaskSpec& spec, int v0, std::vector<Op> ops, std::uint64_t seed,
                              std::int64_t id = 0) {
  spec.validate();
  if (static_cast<int>(ops.size()) != spec.num_steps) throw ConfigError("chain length differs from num_steps");
  auto inter = run_chain(v0, ops, spec.value_bound);
  if (!inter) throw EnvError("chain leaves the value bound");

  Question q;
  q.id = id;
  q.v0 = v0;
  q.ops = std::move(ops);
  q.intermediates = std::move(*inter);
  q.domain = spec.domain;
  q.text = render_question_text(v0, q.ops, 0);

  const int gold = q.intermediates.back();
  std::vector<int> pool;
  auto consider = [&](const std::vector<Op>& chain) {
    std::int64_t v = v0;
    for (const Op& op : chain) v = apply_op(op.kind, v, op.operand);
    if (v > spec.value_bound || v < -spec.value_bound) return;
    const int iv = static_cast<int>(v);
    if (iv != gold && !detail::contains(pool, iv)) pool.push_back(iv);
  };
  const auto kinds = domain_op_kinds(spec.domain);
  for (std::size_t i = 0; i < q.ops.size(); ++i) {
    std::vector<Op> skipped = q.ops;
    skipped.erase(skipped.begin() + static_cast<std::ptrdiff_t>(i));
    consider(skipped);
    for (OpKind k : kinds) {
      if (k == q.ops[i].kind) continue;
      std::vector<Op> swapped = q.ops;
      swapped[i].kind = k;
      consider(swapped);
    }
    for (int d : {-1, 1}) {
      std::vector<Op> shifted = q.ops;
      shifted[i].operand += d;
      consider(shifted);
    }
  }

  Rng rng(derive_seed(seed, {0x0F}));
  rng.shuffle(pool);
  if (pool.size() > kNumOptions - 1) pool.resize(kNumOptions - 1);
  detail::top_up(pool, gold, kNumOptions - 1, spec.value_bound);

  std::array<int, kNumOptions> values = {gold, pool[0], pool[1], pool[2]};
  std::array<int, kNumOptions> order = {0, 1, 2, 3};
  rng.shuffle(std::span<int>(order));
  for (int i = 0; i < kNumOptions; ++i) {
    q.options[static_cast<std::size_t>(i)] = values[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    if (order[static_cast<std::size_t>(i)] == 0) q.gold_letter = letter_of(i);
  }
  return q;
}

// Pure function of (spec, seed, id). Chains leaving the value bound are
// resampled; exhausting the retry budget means the spec is unsatisfiable.
inline Question generate_question(const TaskSpec& spec, std::uint64_t seed, std::int64_t id = 0) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x01}));
  const auto n_kinds = static_cast<std::int64_t>(spec.op_kinds.size());
  for (int attempt = 0; attempt < kMaxGenerationAttempts; ++attempt) {
    const int v0 = static_cast<int>(rng.uniform_int(spec.start_min, spec.start_max));
    std::vector<Op> ops;
    for (int i = 0; i < spec.num_steps; ++i) {
      const OpKind kind = spec.op_kinds[static_cast<std::size_t>(rng.uniform_int(0, n_kinds - 1))];
      const int operand = static_cast<int>(rng.uniform_int(spec.operand_min, spec.operand_max));
      ops.push_back({kind, operand});
    }
    if (!run_chain(v0, ops, spec.value_bound)) continue;
    return make_question(spec, v0, std::move(ops), rng.next(), id);
  }
  throw EnvError("question generation retries exhausted: value_bound rejects every sampled chain");
}

// Questions with ids first_id, first_id + 1, ...
inline std::vector<Question> generate_dataset(const TaskSpec& spec, int count, std::uint64_t seed,
                                              std::int64_t first_id = 0) {
  std::vector<Question> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i)
    out.push_back(generate_question(spec, derive_seed(seed, {static_cast<std::uint64_t>(i)}), first_id + i));
  return out;
}

// ---------------------------------------------------------------------------
// Candidate steps

struct CandidateSet {
  int step_index = 0;
  std::vector<int> candidates;
  bool operator==(const CandidateSet&) const = default;
};

// Candidates for step t (1-based): w_t plus distractors built from w_{t-1}
// with a wrong op kind, an operand off by one, or w_{t-1} itself.
inline CandidateSet candidate_steps(const Question& q, int t, std::uint64_t seed, int num_candidates = 4,
                                    int value_bound = 1000) {
  if (t < 1 || t > q.num_steps()) throw EnvError("candidate_steps: step index out of range");
  if (num_candidates < 2) throw ConfigError("num_candidates must be >= 2");
  const int prev = q.value_at(t - 1);
  const int gold = q.value_at(t);
  const Op& op = q.ops[static_cast<std::size_t>(t - 1)];

  std::vector<int> pool;
  auto consider = [&](std::int64_t v) {
    if (v > value_bound || v < -value_bound) return;
    const int iv = static_cast<int>(v);
    if (iv != gold && !detail::contains(pool, iv)) pool.push_back(iv);
  };
  for (OpKind k : domain_op_kinds(q.domain))
    if (k != op.kind) consider(apply_op(k, prev, op.operand));
  consider(apply_op(op.kind, prev, op.operand - 1));
  consider(apply_op(op.kind, prev, op.operand + 1));
  consider(prev);

  Rng rng(derive_seed(seed, {0x0C, static_cast<std::uint64_t>(t)}));
  rng.shuffle(pool);
  const auto n_distract = static_cast<std::size_t>(num_candidates - 1);
  if (pool.size() > n_distract) pool.resize(n_distract);
  detail::top_up(pool, gold, n_distract, value_bound);

  CandidateSet cs;
  cs.step_index = t;
  cs.candidates.reserve(static_cast<std::size_t>(num_candidates));
  cs.candidates.push_back(gold);
  cs.candidates.insert(cs.candidates.end(), pool.begin(), pool.end());
  rng.shuffle(cs.candidates);
  return cs;
}

// ---------------------------------------------------------------------------
// Decision process

struct MdpState {
  std::int64_t question_id = 0;
  std::vector<int> claims;
  std::optional<char> answer;
  std::string trace_text;

  // Number of actions taken so far.
  int step_index() const { return static_cast<int>(claims.size()) + (answer ? 1 : 0); }
  bool terminal() const { return answer.has_value(); }
  // Working value: the last claim, or v0 before any step.
  int current_value(const Question& q) const { return claims.empty() ? q.v0 : claims.back(); }

  bool operator==(const MdpState&) const = default;
};

enum class Phase : std::uint8_t { step, answer };

// The discrete choices available in a state. For the answer phase `values`
// are the option values in letter order.
struct ActionSet {
  Phase phase = Phase::step;
  int step_index = 0;  // 1-based step for Phase::step; k + 1 for answers
  std::vector<int> values;

  std::size_t size() const { return values.size(); }
  // Index of a value in a step set, or of a letter in an answer set; -1 if absent.
  int index_of_value(int v) const {
    auto it = std::find(values.begin(), values.end(), v);
    return it == values.end() ? -1 : static_cast<int>(it - values.begin());
  }
};

// A step claim (integer) or a final answer letter.
using Action = std::variant<int, char>;

struct Env {
  int num_candidates = 4;
  int value_bound = 1000;
  std::uint64_t candidate_salt = 0;
  // Episodes consist of the final answer only (bandit and fallback use).
  bool answer_only = false;

  static Env for_spec(const TaskSpec& spec) {
    Env e;
    e.num_candidates = spec.num_candidates;
    e.value_bound = spec.value_bound;
    return e;
  }

  // Candidate seeds depend on the question id, so a question always offers
  // the same candidate sets within one environment.
  std::uint64_t candidate_seed(const Question& q) const {
    return derive_seed(candidate_salt, {static_cast<std::uint64_t>(q.id)});
  }

  CandidateSet candidates(const Question& q, int t) const {
    return candidate_steps(q, t, candidate_seed(q), num_candidates, value_bound);
  }

  int max_actions(const Question& q) const { return answer_only ? 1 : q.num_steps() + 1; }

  MdpState initial(const Question& q) const {
    MdpState s;
    s.question_id = q.id;
    return s;
  }

  ActionSet actions(const Question& q, const MdpState& s) const {
    if (s.terminal()) throw EnvError("no actions in a terminal state");
    const int t = s.step_index();
    ActionSet a;
    if (answer_only || t == q.num_steps()) {
      a.phase = Phase::answer;
      a.step_index = q.num_steps() + 1;
      a.values.assign(q.options.begin(), q.options.end());
    } else {
      auto cs = candidates(q, t + 1);
      a.phase = Phase::step;
      a.step_index = t + 1;
      a.values = std::move(cs.candidates);
    }
    return a;
  }

  // Action by index into actions(q, s).
  Action action_at(const ActionSet& set, std::size_t index) const {
    if (set.phase == Phase::answer) return letter_of(static_cast<int>(index));
    return set.values.at(index);
  }

  MdpState transition(const Question& q, const MdpState& s, const Action& a) const {
    if (s.question_id != q.id) throw EnvError("state does not belong to this question");
    if (s.terminal()) throw EnvError("transition on a terminal state");
    const ActionSet offered = actions(q, s);
    MdpState next = s;
    if (offered.phase == Phase::answer) {
      const char* letter = std::get_if<char>(&a);
      if (!letter || letter_index(*letter) < 0) throw EnvError("expected an answer letter A-D");
      const char up = letter_of(letter_index(*letter));
      next.answer = up;
      next.trace_text += "Answer: ";
      next.trace_text += up;
      next.trace_text += '\n';
    } else {
      const int* claim = std::get_if<int>(&a);
      if (!claim) throw EnvError("expected a step claim");
      if (offered.index_of_value(*claim) < 0) throw EnvError("claim is not in the offered candidate set");
      next.claims.push_back(*claim);
      next.trace_text += "Step " + std::to_string(offered.step_index) + ": " + std::to_string(*claim) + '\n';
    }
    return next;
  }
};

// Question header followed by the newline-delimited action lines.
inline std::string serialize_trace(const Question& q, const MdpState& s) { return q.text + '\n' + s.trace_text; }

// The last line of the form "Answer: <A-D>" determines the prediction. No
// such line means the prediction is unparseable.
inline std::optional<char> extract_answer(std::string_view text) {
  std::optional<char> found;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.size() == 9 && line.substr(0, 8) == "Answer: " && line[8] >= 'A' && line[8] <= 'D')
      found = line[8];
    if (end == text.size()) break;
    pos = end + 1;
  }
  return found;
}

// ---------------------------------------------------------------------------
// Validation and dataset files

inline void validate_question(const Question& q, int value_bound = 1000) {
  auto inter = run_chain(q.v0, q.ops, value_bound);
  if (!inter) throw FormatError("question " + std::to_string(q.id) + ": chain leaves the value bound");
  if (*inter != q.intermediates) throw FormatError("question " + std::to_string(q.id) + ": intermediates mismatch");
  for (int i = 0; i < kNumOptions; ++i)
    for (int j = i + 1; j < kNumOptions; ++j)
      if (q.options[static_cast<std::size_t>(i)] == q.options[static_cast<std::size_t>(j)])
        throw FormatError("question " + std::to_string(q.id) + ": duplicate option values");
  if (q.gold_letter < 'A' || q.gold_letter > 'D') throw FormatError("question " + std::to_string(q.id) + ": bad gold letter");
  const bool corrupted = q.provenance && q.provenance->corrupted;
  if (!corrupted && !q.ops.empty() && q.gold_value() != q.intermediates.back())
    throw FormatError("question " + std::to_string(q.id) + ": gold option differs from the final intermediate");
}

// Dataset record field order: id, text, v0, ops, options, gold_letter,
// domain_tag, then provenance for augmented variants.
inline nlohmann::ordered_json question_to_json(const Question& q) {
  nlohmann::ordered_json j;
  j["id"] = q.id;
  j["text"] = q.text;
  j["v0"] = q.v0;
  auto ops = nlohmann::ordered_json::array();
  for (const Op& op : q.ops) ops.push_back({std::string(to_string(op.kind)), op.operand});
  j["ops"] = std::move(ops);
  nlohmann::ordered_json opts;
  for (int i = 0; i < kNumOptions; ++i) opts[std::string(1, letter_of(i))] = q.options[static_cast<std::size_t>(i)];
  j["options"] = std::move(opts);
  j["gold_letter"] = std::string(1, q.gold_letter);
  j["domain_tag"] = std::string(to_string(q.domain));
  if (q.provenance) {
    nlohmann::ordered_json p;
    p["origin_id"] = q.provenance->origin_id;
    p["variant_index"] = q.provenance->variant_index;
    std::string perm;
    for (int x : q.provenance->permutation) perm += letter_of(x);
    p["permutation"] = perm;
    if (q.provenance->corrupted) p["corrupted"] = true;
    j["provenance"] = std::move(p);
  }
  return j;
}

inline Question question_from_json(const nlohmann::json& j) {
  try {
    Question q;
    q.id = j.at("id").get<std::int64_t>();
    q.text = j.at("text").get<std::string>();
    q.v0 = j.at("v0").get<int>();
    for (const auto& op : j.at("ops")) q.ops.push_back({parse_op_kind(op.at(0).get<std::string>()), op.at(1).get<int>()});
    const auto& opts = j.at("options");
    for (int i = 0; i < kNumOptions; ++i)
      q.options[static_cast<std::size_t>(i)] = opts.at(std::string(1, letter_of(i))).get<int>();
    const auto gold = j.at("gold_letter").get<std::string>();
    if (gold.size() != 1) throw FormatError("gold_letter must be one letter");
    q.gold_letter = gold[0];
    q.domain = parse_domain(j.at("domain_tag").get<std::string>());
    if (j.contains("provenance")) {
      const auto& p = j["provenance"];
      Provenance pv;
      pv.origin_id = p.at("origin_id").get<std::int64_t>();
      pv.variant_index = p.at("variant_index").get<int>();
      const auto perm = p.at("permutation").get<std::string>();
      if (perm.size() != kNumOptions) throw FormatError("permutation must have 4 letters");
      for (int i = 0; i < kNumOptions; ++i) pv.permutation[static_cast<std::size_t>(i)] = letter_index(perm[static_cast<std::size_t>(i)]);
      pv.corrupted = p.value("corrupted", false);
      q.provenance = pv;
    }
    auto inter = run_chain(q.v0, q.ops, std::numeric_limits<int>::max());
    if (!inter) throw FormatError("chain overflow");
    q.intermediates = std::move(*inter);
    return q;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed question record: ") + e.what());
  }
}

inline std::string write_dataset(const std::vector<Question>& qs) {
  std::string out;
  for (const auto& q : qs) out += question_to_json(q).dump() + '\n';
  return out;
}

inline std::vector<Question> read_dataset(std::string_view text, int value_bound = 1000) {
  std::vector<Question> out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("dataset line is not valid JSON: ") + e.what());
    }
    out.push_back(question_from_json(j));
    validate_question(out.back(), value_bound);
  }
  return out;
}

}  // namespace openrft
