#pragma once

// Shared fixtures for the unit tests: random states, finite differences.

#include <cmath>
#include <functional>
#include <vector>

#include "openrft/policy.hpp"
#include "openrft/task_env.hpp"

namespace testing {

using namespace openrft;

struct Draw {
  Question q;
  MdpState s;
  ActionSet actions;
  ContextBlock ctx;
};

// A random non-terminal state reached by uniform actions, optionally with a
// random context block.
inline Draw random_draw(Rng& rng, const FeatureLayout& layout, const Env& env = {}, bool with_ctx = true) {
  const int k = static_cast<int>(rng.uniform_int(1, 5));
  Draw d;
  d.q = generate_question(TaskSpec::target(k), rng.next(), static_cast<std::int64_t>(rng.uniform_int(0, 1 << 20)));
  d.s = env.initial(d.q);
  const auto steps = rng.uniform_int(0, k);
  for (std::int64_t i = 0; i < steps; ++i) {
    const auto a = env.actions(d.q, d.s);
    d.s = env.transition(d.q, d.s, env.action_at(a, static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(a.size()) - 1))));
  }
  d.actions = env.actions(d.q, d.s);
  if (with_ctx && rng.uniform() < 0.5) {
    d.ctx.values.resize(static_cast<std::size_t>(layout.context_dim));
    for (double& x : d.ctx.values) x = rng.uniform(-1.0, 1.0);
  }
  return d;
}

// Always the gold step and the gold letter.
struct OracleChooser {
  SampledAction choose(const Question& q, const MdpState& s, const ActionSet& a, Rng&) const {
    if (a.phase == Phase::answer) return {static_cast<std::size_t>(q.gold_index()), 0.0};
    return {static_cast<std::size_t>(a.index_of_value(q.value_at(s.step_index() + 1))), 0.0};
  }
};

// Gold steps, then a fixed wrong letter.
struct AdversarialChooser {
  SampledAction choose(const Question& q, const MdpState& s, const ActionSet& a, Rng& rng) const {
    if (a.phase == Phase::answer) return {static_cast<std::size_t>((q.gold_index() + 1) % 4), 0.0};
    return OracleChooser{}.choose(q, s, a, rng);
  }
};

struct UniformChooser {
  SampledAction choose(const Question&, const MdpState&, const ActionSet& a, Rng& rng) const {
    return {static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(a.size()) - 1)), 0.0};
  }
};

// Single-decision bandit: an answer-only question whose four arms are spaced
// 100 apart, so the candidate-value feature separates them.
inline Question bandit_question(std::uint64_t seed) {
  Rng rng(seed);
  Question q = make_question(TaskSpec::target(1), 10, {{OpKind::add, 2}}, seed);
  const int gold = static_cast<int>(rng.uniform_int(0, kNumOptions - 1));
  const int w = q.intermediates.back();
  for (int i = 0; i < kNumOptions; ++i) q.options[static_cast<std::size_t>(i)] = w + 100 * (i - gold);
  q.gold_letter = letter_of(gold);
  return q;
}

inline PolicyParams random_params(const FeatureLayout& layout, Rng& rng, int hidden = 8, double scale = 0.5) {
  return PolicyParams::random(PolicyDims::for_layout(layout, hidden), rng.next(), scale);
}

// Relative error of an analytic gradient against central differences over
// the coordinates `idx`, as a norm ratio.
inline double fd_rel_error(PolicyParams p, const std::function<double(const PolicyParams&)>& f,
                           const std::vector<double>& analytic, const std::vector<std::size_t>& idx, double h = 1e-5) {
  double num = 0.0, den = 0.0;
  for (std::size_t i : idx) {
    const double orig = p.flat()[i];
    p.flat()[i] = orig + h;
    const double up = f(p);
    p.flat()[i] = orig - h;
    const double down = f(p);
    p.flat()[i] = orig;
    const double fd = (up - down) / (2 * h);
    num += (fd - analytic[i]) * (fd - analytic[i]);
    den += std::max(fd * fd, analytic[i] * analytic[i]);
  }
  return den == 0.0 ? std::sqrt(num) : std::sqrt(num / den);
}

// `n` random coordinates inside [offset, offset + size), plus the last bias.
inline std::vector<std::size_t> sample_coords(Rng& rng, std::size_t offset, std::size_t size, int n) {
  std::vector<std::size_t> idx;
  for (int i = 0; i < n; ++i) idx.push_back(offset + static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(size) - 1)));
  idx.push_back(offset + size - 1);
  return idx;
}

}  // namespace testing
