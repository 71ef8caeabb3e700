#include <catch_amalgamated.hpp>

#include <fstream>
#include <set>
#include <sstream>

#include "openrft/task_env.hpp"

using namespace openrft;

namespace {

Question forced(int k, int v0, std::vector<Op> ops, Domain d = Domain::target) {
  TaskSpec spec = d == Domain::target ? TaskSpec::target(k) : TaskSpec::source(k);
  return make_question(spec, v0, std::move(ops), 11, 7);
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

MdpState replay_gold(const Env& env, const Question& q) {
  MdpState s = env.initial(q);
  for (int t = 1; t <= q.num_steps(); ++t) s = env.transition(q, s, q.value_at(t));
  return env.transition(q, s, q.gold_letter);
}

}  // namespace

TEST_CASE("forced chains compute intermediates by hand arithmetic") {
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  CHECK(q.intermediates == std::vector<int>{8, 16});
  CHECK(q.gold_value() == 16);

  const Question r = forced(1, 7, {{OpKind::sub, 2}});
  CHECK(r.intermediates == std::vector<int>{5});
  CHECK(r.gold_value() == 5);
}

TEST_CASE("generation is a pure function of spec and seed") {
  const TaskSpec spec = TaskSpec::target(4);
  const Question a = generate_question(spec, 1234, 3);
  const Question b = generate_question(spec, 1234, 3);
  CHECK(a == b);
  CHECK(question_to_json(a).dump() == question_to_json(b).dump());
  CHECK_FALSE(generate_question(spec, 1235, 3) == a);
}

TEST_CASE("generated questions satisfy the type invariants") {
  for (Domain d : {Domain::source, Domain::target}) {
    for (int k = 1; k <= 6; ++k) {
      TaskSpec spec = d == Domain::source ? TaskSpec::source(k) : TaskSpec::target(k);
      for (std::uint64_t seed = 0; seed < 200; ++seed) {
        const Question q = generate_question(spec, seed);
        REQUIRE(q.num_steps() == k);
        std::int64_t w = q.v0;
        CHECK(q.v0 >= spec.start_min);
        CHECK(q.v0 <= spec.start_max);
        for (int t = 0; t < k; ++t) {
          const Op& op = q.ops[static_cast<std::size_t>(t)];
          CHECK(op.operand >= 2);
          CHECK(op.operand <= 9);
          if (d == Domain::source) CHECK(op.kind != OpKind::mul);
          w = op.kind == OpKind::add ? w + op.operand : op.kind == OpKind::sub ? w - op.operand : w * op.operand;
          CHECK(q.intermediates[static_cast<std::size_t>(t)] == w);
          CHECK(std::abs(w) <= 1000);
        }
        std::set<int> opts(q.options.begin(), q.options.end());
        CHECK(opts.size() == 4);
        CHECK(q.gold_value() == q.intermediates.back());
        CHECK(q.domain == d);
        CHECK_NOTHROW(validate_question(q));
      }
    }
  }
}

TEST_CASE("distractor options come from single-fault corruptions or top-up") {
  const TaskSpec spec = TaskSpec::target(3);
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Question q = generate_question(spec, seed);
    std::set<int> faults;
    const auto kinds = domain_op_kinds(q.domain);
    for (std::size_t i = 0; i < q.ops.size(); ++i) {
      auto variant = [&](std::vector<Op> ops) {
        if (auto r = run_chain(q.v0, ops, 1000)) faults.insert(r->empty() ? q.v0 : r->back());
      };
      std::vector<Op> skip = q.ops;
      skip.erase(skip.begin() + static_cast<std::ptrdiff_t>(i));
      variant(skip);
      for (OpKind k : kinds) {
        std::vector<Op> wk = q.ops;
        wk[i].kind = k;
        variant(wk);
      }
      for (int d : {-1, 1}) {
        std::vector<Op> off = q.ops;
        off[i].operand += d;
        variant(off);
      }
    }
    for (int i = 0; i < 4; ++i) {
      const int v = q.options[static_cast<std::size_t>(i)];
      if (i == q.gold_index()) continue;
      const bool from_fault = faults.count(v) > 0;
      const bool top_up = std::abs(v - q.gold_value()) <= 3;
      CHECK((from_fault || top_up));
    }
  }
}

TEST_CASE("unsatisfiable specs signal an error") {
  TaskSpec spec = TaskSpec::target(6);
  spec.op_kinds = {OpKind::mul};
  spec.start_min = 900;
  spec.start_max = 990;
  CHECK_THROWS_AS(generate_question(spec, 1), EnvError);

  TaskSpec bad = TaskSpec::source(2);
  bad.op_kinds.push_back(OpKind::mul);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  TaskSpec zero = TaskSpec::target(0);
  CHECK_THROWS_AS(zero.validate(), ConfigError);
}

TEST_CASE("candidate sets contain the gold step once among distinct values") {
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  const CandidateSet cs = candidate_steps(q, 1, 99, 4);
  CHECK(cs.step_index == 1);
  CHECK(std::count(cs.candidates.begin(), cs.candidates.end(), 8) == 1);
  CHECK(cs.candidates.size() == 4);

  const CandidateSet two = candidate_steps(q, 2, 99, 2);
  REQUIRE(two.candidates.size() == 2);
  CHECK(std::count(two.candidates.begin(), two.candidates.end(), 16) == 1);
  CHECK(two.candidates[0] != two.candidates[1]);

  CHECK_THROWS_AS(candidate_steps(q, 0, 1), EnvError);
  CHECK_THROWS_AS(candidate_steps(q, 3, 1), EnvError);
}

TEST_CASE("exhaustive scan finds no duplicate candidates") {
  const TaskSpec spec = TaskSpec::target(4);
  int dupes = 0, missing = 0;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const Question q = generate_question(spec, seed);
    for (int t = 1; t <= q.num_steps(); ++t) {
      const auto cs = candidate_steps(q, t, seed * 31 + 5);
      const std::set<int> uniq(cs.candidates.begin(), cs.candidates.end());
      dupes += uniq.size() != cs.candidates.size() ? 1 : 0;
      missing += std::count(cs.candidates.begin(), cs.candidates.end(), q.value_at(t)) == 1 ? 0 : 1;
    }
  }
  CHECK(dupes == 0);
  CHECK(missing == 0);
}

TEST_CASE("candidate distractors are corrupted intermediates at step t") {
  const TaskSpec spec = TaskSpec::target(4);
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    const Question q = generate_question(spec, seed);
    for (int t = 1; t <= q.num_steps(); ++t) {
      const int prev = q.value_at(t - 1);
      const Op& op = q.ops[static_cast<std::size_t>(t - 1)];
      std::set<int> allowed = {prev};
      for (OpKind k : {OpKind::add, OpKind::sub, OpKind::mul}) allowed.insert(static_cast<int>(apply_op(k, prev, op.operand)));
      allowed.insert(static_cast<int>(apply_op(op.kind, prev, op.operand - 1)));
      allowed.insert(static_cast<int>(apply_op(op.kind, prev, op.operand + 1)));
      for (int c : candidate_steps(q, t, seed).candidates) {
        const bool near_gold = std::abs(c - q.value_at(t)) <= 3;
        CHECK((allowed.count(c) > 0 || near_gold));
      }
    }
  }
}

TEST_CASE("candidate order is deterministic and the gold position is uniform") {
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  CHECK(candidate_steps(q, 1, 42) == candidate_steps(q, 1, 42));
  std::array<int, 4> counts{};
  const int n = 10000;
  for (int seed = 0; seed < n; ++seed) {
    const auto cs = candidate_steps(q, 1, static_cast<std::uint64_t>(seed));
    const auto pos = std::find(cs.candidates.begin(), cs.candidates.end(), 8) - cs.candidates.begin();
    ++counts[static_cast<std::size_t>(pos)];
  }
  for (int c : counts) CHECK(std::abs(c / static_cast<double>(n) - 0.25) <= 0.03);
}

TEST_CASE("transitions append one newline-terminated line") {
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  const Env env;
  const MdpState s0 = env.initial(q);
  const MdpState s1 = env.transition(q, s0, 8);
  CHECK(s1.step_index() == 1);
  CHECK(s1.claims == std::vector<int>{8});
  CHECK(s1.trace_text == "Step 1: 8\n");
  // the prior state is untouched
  CHECK(s0.step_index() == 0);
  CHECK(s0.trace_text.empty());

  const MdpState s2 = env.transition(q, s1, 16);
  const MdpState s3 = env.transition(q, s2, 'C');
  CHECK(s3.terminal());
  CHECK(s3.step_index() == 3);
  CHECK(s3.trace_text == "Step 1: 8\nStep 2: 16\nAnswer: C\n");
  CHECK(s2.trace_text == "Step 1: 8\nStep 2: 16\n");

  CHECK_THROWS_AS(env.transition(q, s3, 'A'), EnvError);
  const auto offered = env.actions(q, s0).values;
  int outside = 0;
  while (std::find(offered.begin(), offered.end(), outside) != offered.end()) ++outside;
  CHECK_THROWS_AS(env.transition(q, s0, outside), EnvError);
  CHECK_THROWS_AS(env.transition(q, s0, 'A'), EnvError);
  CHECK_THROWS_AS(env.transition(q, s2, 16), EnvError);
  CHECK_THROWS_AS(env.transition(q, s2, 'E'), EnvError);
}

TEST_CASE("replaying recorded actions yields k+1 lines and the gold letter") {
  const TaskSpec spec = TaskSpec::target(5);
  const Env env;
  for (std::uint64_t seed = 0; seed < 300; ++seed) {
    const Question q = generate_question(spec, seed, static_cast<std::int64_t>(seed));
    const MdpState s = replay_gold(env, q);
    CHECK(std::count(s.trace_text.begin(), s.trace_text.end(), '\n') == q.num_steps() + 1);
    CHECK(s.trace_text.back() == '\n');
    CHECK(extract_answer(serialize_trace(q, s)) == q.gold_letter);
  }
}

TEST_CASE("serialization round-trips the chosen letter") {
  const TaskSpec spec = TaskSpec::target(3);
  const Env env;
  Rng rng(5);
  for (int i = 0; i < 1000; ++i) {
    const Question q = generate_question(spec, static_cast<std::uint64_t>(i), i);
    MdpState s = env.initial(q);
    while (!s.terminal()) {
      const auto a = env.actions(q, s);
      const auto idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(a.size()) - 1));
      s = env.transition(q, s, env.action_at(a, idx));
    }
    const std::string text = serialize_trace(q, s);
    CHECK(text.rfind(q.text + '\n', 0) == 0);
    CHECK(extract_answer(text) == s.answer);
  }
}

TEST_CASE("answer extraction follows the exact line pattern") {
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  const Env env;
  const MdpState s1 = env.transition(q, env.initial(q), 8);
  const std::string partial = serialize_trace(q, s1);
  CHECK(partial.find("Answer:") == std::string::npos);
  CHECK_FALSE(extract_answer(partial).has_value());

  CHECK(extract_answer("Answer: B\n") == 'B');
  CHECK(extract_answer("Answer: B\nAnswer: D") == 'D');
  CHECK_FALSE(extract_answer("Answer: b\n").has_value());
  CHECK_FALSE(extract_answer("Answer: E\n").has_value());
  CHECK_FALSE(extract_answer("Answer:B\n").has_value());
  CHECK_FALSE(extract_answer("The Answer: B\n").has_value());
  CHECK_FALSE(extract_answer("Answer: BC\n").has_value());
  CHECK(extract_answer("Answer: A\r\n") == 'A');
}

TEST_CASE("answer-only environments offer the four letters immediately") {
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  Env env;
  env.answer_only = true;
  const auto a = env.actions(q, env.initial(q));
  CHECK(a.phase == Phase::answer);
  CHECK(a.values == std::vector<int>(q.options.begin(), q.options.end()));
  const MdpState s = env.transition(q, env.initial(q), 'B');
  CHECK(s.terminal());
  CHECK(s.trace_text == "Answer: B\n");
}

TEST_CASE("dataset records keep a stable field order") {
  Question q;
  q.id = 3;
  q.text = "Start with 5. Then add 3, then multiply by 2. What is the final value?";
  q.v0 = 5;
  q.ops = {{OpKind::add, 3}, {OpKind::mul, 2}};
  q.intermediates = {8, 16};
  q.options = {10, 16, 13, 18};
  q.gold_letter = 'B';
  q.domain = Domain::target;
  const std::string expected =
      R"({"id":3,"text":"Start with 5. Then add 3, then multiply by 2. What is the final value?","v0":5,)"
      R"("ops":[["add",3],["mul",2]],"options":{"A":10,"B":16,"C":13,"D":18},"gold_letter":"B","domain_tag":"target"})"
      "\n";
  CHECK(write_dataset({q}) == expected);
  const auto back = read_dataset(expected);
  REQUIRE(back.size() == 1);
  CHECK(back[0] == q);
}

TEST_CASE("dataset golden file") {
  const auto qs = generate_dataset(TaskSpec::target(3), 5, 2024, 0);
  const std::string golden = slurp(std::string(OPENRFT_TEST_DATA) + "/dataset_golden.jsonl");
  CHECK(write_dataset(qs) == golden);
  CHECK(read_dataset(golden) == qs);
}

TEST_CASE("malformed dataset lines are rejected") {
  CHECK_THROWS_AS(read_dataset("{not json}\n"), FormatError);
  CHECK_THROWS_AS(read_dataset(R"({"id":1})" "\n"), FormatError);
  const Question q = forced(2, 5, {{OpKind::add, 3}, {OpKind::mul, 2}});
  auto j = question_to_json(q);
  j["options"]["A"] = q.options[1];
  CHECK_THROWS_AS(read_dataset(j.dump() + "\n"), FormatError);
  auto g = question_to_json(q);
  g["gold_letter"] = std::string(1, q.gold_letter == 'A' ? 'B' : 'A');
  CHECK_THROWS_AS(read_dataset(g.dump() + "\n"), FormatError);
}
