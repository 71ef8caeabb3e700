#include <catch_amalgamated.hpp>

#include <filesystem>
#include <set>

#include "openrft/harness.hpp"
#include "support.hpp"

using namespace openrft;
using Catch::Matchers::WithinAbs;
namespace fs = std::filesystem;

namespace {

// Small enough to run several methods in a unit test.
ExperimentConfig tiny(Method m) {
  ExperimentConfig c;
  c.method = m;
  c.target = TaskSpec::target(2);
  c.train_size = 6;
  c.test_size = 20;
  c.eval_repeats = 2;
  c.seeds = {3};
  c.rl_passes = 8;
  c.ppo.rollouts_per_iter = 16;
  return c;
}

VanillaCache& shared_cache() {
  static VanillaCache cache;
  return cache;
}

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("openrft_test_" + name);
  fs::remove_all(dir);
  return dir;
}

}  // namespace

TEST_CASE("methods parse and map to stage lists") {
  for (Method m : kAllMethods) CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS_AS(parse_method("sft_rl"), ConfigError);
  using K = StageKind;
  const auto kinds = [](Method m) {
    std::vector<K> out;
    for (const auto& s : method_pipeline(m)) out.push_back(s.kind);
    return out;
  };
  CHECK(kinds(Method::vanilla).empty());
  CHECK(kinds(Method::reft) == std::vector<K>{K::rl});
  CHECK(method_pipeline(Method::reft)[0].outcome_only);
  CHECK_FALSE(method_pipeline(Method::reft_prm)[0].outcome_only);
  CHECK(kinds(Method::sft) == std::vector<K>{K::synthesize_self, K::sft});
  CHECK(kinds(Method::sft_plus) == std::vector<K>{K::synthesize_mismatched, K::sft});
  CHECK(kinds(Method::sft_rl_prm) == std::vector<K>{K::synthesize_self, K::sft, K::rl});
  CHECK(kinds(Method::sft_rl_prm_da) == std::vector<K>{K::synthesize_self, K::sft, K::augment, K::rl});
  CHECK(kinds(Method::sft_rl_prm_da_icl) == std::vector<K>{K::icl_index, K::synthesize_self, K::sft, K::augment, K::rl});
}

TEST_CASE("experiment config defaults and validation") {
  const ExperimentConfig c;
  CHECK(c.train_size == 100);
  CHECK(c.test_size == 100);
  CHECK(c.eval_repeats == 3);
  CHECK(c.reward.alpha == 0.7);
  CHECK(c.augment.n_variants == 5);
  CHECK(c.icl.k == 3);
  CHECK(c.layout().size() == 79);
  c.validate();
  auto bad = c;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.train_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.source = TaskSpec::target(4);
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("experiment config JSON round-trips and rejects unknown keys") {
  ExperimentConfig c;
  c.method = Method::sft_rl_prm_da;
  c.seeds = {7, 9};
  c.reward.alpha = 0.25;
  c.reward.aggregation = Aggregation::min;
  c.ppo.clip_epsilon = 0.1;
  c.ppo.kl_coeff = 0.05;
  c.sft.learning_rate = 3e-3;
  c.augment.n_variants = 3;
  c.icl.consistent = false;
  c.target = TaskSpec::target(5);
  c.output_dir = "elsewhere";
  const auto j = experiment_config_to_json(c);
  const auto back = experiment_config_from_json(nlohmann::json::parse(j.dump()));
  CHECK(experiment_config_to_json(back) == j);
  CHECK(back.seeds == c.seeds);
  CHECK(back.target == c.target);

  // partial overlays keep the remaining defaults
  const auto part = experiment_config_from_json(nlohmann::json::parse(R"({"train_size": 12, "ppo": {"kl_coeff": 0.5}})"));
  CHECK(part.train_size == 12);
  CHECK(part.ppo.kl_coeff == 0.5);
  CHECK(part.ppo.clip_epsilon == 0.2);

  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"trian_size": 12})")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"ppo": {"lr": 1}})")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"method": "nope"})")), ConfigError);
  CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"train_size": "ten"})")), ConfigError);
}

TEST_CASE("run ids hash the config body") {
  ExperimentConfig a;
  auto b = a;
  b.output_dir = "other";
  CHECK(run_id(a) == run_id(b));
  CHECK(run_id(a).size() == 12);
  b.seeds = {1};
  CHECK(run_id(a) != run_id(b));
}

TEST_CASE("evaluation protocol") {
  const auto qs = generate_dataset(TaskSpec::target(3), 100, 5, kTestIdBase);
  const Env env;
  const auto oracle = evaluate_with(testing::OracleChooser{}, qs, env, 3, 1);
  CHECK(oracle.per_repeat == std::vector<double>{1.0, 1.0, 1.0});

  Env answers;
  answers.answer_only = true;
  const auto uniform = evaluate_with(testing::UniformChooser{}, qs, answers, 3, 1);
  CHECK(uniform.mean >= 0.17);
  CHECK(uniform.mean <= 0.33);
  CHECK_THAT(uniform.mean, WithinAbs((uniform.per_repeat[0] + uniform.per_repeat[1] + uniform.per_repeat[2]) / 3, 1e-15));

  // stopping before the final action leaves no answer line
  const auto cut = evaluate_with(testing::OracleChooser{}, qs, env, 2, 1, 3);
  CHECK(cut.mean == 0.0);

  CHECK_THROWS_AS(evaluate_with(testing::OracleChooser{}, qs, env, 0, 1), ConfigError);
  CHECK_THROWS_AS(evaluate_with(testing::OracleChooser{}, std::vector<Question>{}, env, 1, 1), ConfigError);
}

TEST_CASE("seed data splits are disjoint, also after augmentation") {
  ExperimentConfig c;
  c.sft_size = 150;
  const auto d = make_seed_data(c, 4);
  CHECK(d.train.size() == 150);
  CHECK(d.test.size() == 100);
  std::set<std::int64_t> train_ids;
  for (const auto& q : augment_dataset(d.train, c.augment, 1)) train_ids.insert(q.id);
  for (const auto& q : d.test) CHECK_FALSE(train_ids.count(q.id));
  CHECK(make_seed_data(c, 4).test == d.test);
  CHECK_FALSE(make_seed_data(c, 5).test == d.test);
}

TEST_CASE("RL budget scales with the pool") {
  ExperimentConfig c;
  CHECK(rl_iterations(c, 100) == 100);
  CHECK(rl_iterations(c, 600) == 600);
  c.rl_passes = 1.5;
  CHECK(rl_iterations(c, 100) == 3);
  c.ppo.iterations = 7;
  CHECK(rl_iterations(c, 100) == 7);
}

TEST_CASE("report mean and stddev match the stored repeats") {
  MetricsReport r;
  r.seeds.resize(2);
  r.seeds[0].accuracies = {0.5, 0.7, 0.6};
  r.seeds[1].accuracies = {0.9, 0.8, 1.0};
  r.finalize();
  CHECK_THAT(r.mean, WithinAbs(4.5 / 6, 1e-12));
  double var = 0.0;
  for (double a : {0.5, 0.7, 0.6, 0.9, 0.8, 1.0}) var += (a - 0.75) * (a - 0.75);
  CHECK_THAT(r.stddev, WithinAbs(std::sqrt(var / 6), 1e-12));
}

TEST_CASE("report files round-trip and re-emit byte-identically") {
  MetricsReport r;
  r.method = "sft_rl_prm";
  r.task = "target-k4";
  r.run_id = "0123456789ab";
  r.config = experiment_config_to_json(ExperimentConfig{});
  r.config.erase("output_dir");
  for (std::uint64_t s : {0u, 1u}) {
    SeedMetrics m;
    m.seed = s;
    m.accuracies = {0.1 * static_cast<double>(s) + 0.3, 1.0 / 3.0, 0.77};
    m.source_accuracy = 0.93;
    m.pool_size = 600;
    m.synthesis_records = 100;
    m.synthesis_fallbacks = 4;
    m.sft_losses = {1.2, 0.9};
    m.rl.iterations = 600;
    m.rl.episodes = 38400;
    m.rl.mean_reward = 0.61;
    m.rl.any_step_episodes = 20000;
    m.rl.failed_any_step_min_reward = 0.075;
    r.seeds.push_back(m);
  }
  r.finalize();
  r.timings = {{"rl", 12.5}, {"sft", 0.25}};

  const auto dir = scratch_dir("emit");
  const auto files = emit_report(r, dir);
  std::vector<std::string> first;
  for (const auto& f : files) first.push_back(detail::read_file(f));
  const auto loaded = load_report(dir);
  CHECK(loaded.same_body(r));
  CHECK(loaded.timings == r.timings);
  emit_report(loaded, dir);
  for (std::size_t i = 0; i < files.size(); ++i) CHECK(detail::read_file(files[i]) == first[i]);

  const std::string table = first[1];
  CHECK(table.find("sft_rl_prm") != std::string::npos);
  CHECK(table.find("target-k4") != std::string::npos);
  CHECK(table.find(format_fixed(r.mean)) != std::string::npos);

  const std::string csv = first[2];
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 7);
  CHECK(csv.rfind("method,seed,repeat,accuracy\n", 0) == 0);
  CHECK_THROWS_AS(parse_metrics_jsonl("{\"type\":\"mystery\"}\n"), FormatError);
  CHECK_THROWS_AS(parse_metrics_jsonl("{oops\n"), FormatError);
  fs::remove_all(dir);
}

TEST_CASE("summary table layout") {
  std::vector<MetricsReport> rs(3);
  rs[0].method = "vanilla";
  rs[0].task = "target-k3";
  rs[0].mean = 0.25;
  rs[1].method = "vanilla";
  rs[1].task = "target-k4";
  rs[1].mean = 0.5;
  rs[2].method = "reft";
  rs[2].task = "target-k3";
  rs[2].mean = 0.75;
  const auto t = summary_table(rs);
  std::istringstream in(t);
  std::string header, row1, row2;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  CHECK(header.rfind("Method", 0) == 0);
  CHECK(header.find("target-k3") < header.find("target-k4"));
  CHECK(row1.rfind("vanilla", 0) == 0);
  CHECK(row1.substr(row1.size() - 5) == "0.375");
  CHECK(row2.find(" - ") != std::string::npos);
}

TEST_CASE("sweep CSV") {
  SweepTable t;
  for (const char* m : {"reft", "sft_rl_prm"})
    for (int size : {25, 50})
      for (std::uint64_t s : {0u, 1u, 2u}) t.rows.push_back({m, size, s, 0.5});
  const auto csv = sweep_csv(t.rows);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 2 * 3);
  CHECK(sweep_mean(t, "reft", 25) == 0.5);
  CHECK_THROWS_AS(sweep_mean(t, "reft", 400), ConfigError);
}

TEST_CASE("pretraining yields a generalist with a domain gap") {
  const auto cfg = tiny(Method::vanilla);
  const auto& a = shared_cache().get(cfg, 3);
  CHECK(a.source_accuracy >= 0.9);
  const auto again = pretrain_vanilla(cfg.source, 3, cfg.pretrain, cfg.layout(), cfg.hidden);
  CHECK(again.params == a.params);
  const auto test_src = generate_dataset(cfg.source, 200, 99, kTestIdBase);
  const auto test_tgt = generate_dataset(TaskSpec::target(4), 200, 99, kTestIdBase);
  const double src = evaluate(a.params, cfg.layout(), test_src, task_env(cfg.source, 3), 1).mean;
  const double tgt = evaluate(a.params, cfg.layout(), test_tgt, task_env(TaskSpec::target(4), 3), 1).mean;
  CHECK(tgt < src);
}

TEST_CASE("vanilla report equals a direct evaluation") {
  const auto cfg = tiny(Method::vanilla);
  const auto rep = run_method(cfg, shared_cache());
  const auto& pre = shared_cache().get(cfg, 3);
  const auto data = make_seed_data(cfg, 3);
  const auto ev = evaluate(pre.params, cfg.layout(), data.test, task_env(cfg.target, 3), cfg.eval_repeats, cfg.temperature,
                           derive_seed(3, {0xD1}));
  REQUIRE(rep.seeds.size() == 1);
  CHECK(rep.seeds[0].accuracies == ev.per_repeat);
  CHECK(rep.seeds[0].pool_size == 0);
  CHECK(rep.task == "target-k2");
}

TEST_CASE("pipelines are deterministic and size their pools") {
  for (Method m : {Method::sft_rl_prm_da, Method::sft_rl_prm_da_icl, Method::sft_plus}) {
    const auto cfg = tiny(m);
    const auto a = run_method(cfg, shared_cache());
    const auto b = run_method(cfg, shared_cache());
    CHECK(a.same_body(b));
    CHECK(a.seeds[0].synthesis_records == cfg.train_size);
    if (m != Method::sft_plus) {
      CHECK(a.seeds[0].pool_size == 6 * cfg.train_size);
      CHECK(a.seeds[0].rl.iterations == rl_iterations(cfg, 36));
    }
    for (double acc : a.seeds[0].accuracies) {
      CHECK(acc >= 0.0);
      CHECK(acc <= 1.0);
    }
  }
  auto bad = tiny(Method::sft);
  bad.seeds.clear();
  CHECK_THROWS_AS(run_method(bad, shared_cache()), ConfigError);
}
