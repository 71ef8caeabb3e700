// Command-line front end: datasets, single stages, the method matrix, the
// data-scale sweep and report aggregation.
//
// Configuration layers, lowest first: built-in defaults, --config file,
// OPENRFT_SEED, then flags (including --set path=value).

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "openrft/openrft.hpp"

namespace fs = std::filesystem;
using namespace openrft;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kNumeric = 3, kThreshold = 4 };

struct CommonFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> method;
  std::optional<int> train_size, test_size, eval_repeats, k;
  std::optional<std::vector<std::uint64_t>> seeds;
  std::optional<double> alpha, rl_passes, temperature;
  std::optional<std::string> output_dir;
};

void add_common(CLI::App* app, CommonFlags& f) {
  app->add_option("--config", f.config_file, "JSON experiment config")->check(CLI::ExistingFile);
  app->add_option("--set", f.sets, "override any config field, e.g. ppo.kl_coeff=0.05");
  app->add_option("--method", f.method, "method name");
  app->add_option("--train-size", f.train_size);
  app->add_option("--test-size", f.test_size);
  app->add_option("--eval-repeats", f.eval_repeats);
  app->add_option("--k", f.k, "target-domain chain length");
  app->add_option("--seeds", f.seeds, "master seeds")->delimiter(',');
  app->add_option("--alpha", f.alpha, "outcome weight of the combined reward");
  app->add_option("--rl-passes", f.rl_passes, "RL episodes per pool question");
  app->add_option("--temperature", f.temperature);
  app->add_option("--output-dir", f.output_dir);
}

nlohmann::json parse_scalar(const std::string& text) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception&) {
    return text;
  }
}

// Sets a dotted path inside `j`, creating objects along the way.
void set_path(nlohmann::json& j, const std::string& path, nlohmann::json value) {
  nlohmann::json* cur = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) throw ConfigError("bad --set path '" + path + "'");
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      return;
    }
    cur = &(*cur)[key];
    start = dot + 1;
  }
}

ExperimentConfig resolve(const CommonFlags& f) {
  ExperimentConfig cfg;
  if (!f.config_file.empty()) {
    std::string text = detail::read_file(f.config_file);
    try {
      cfg = experiment_config_from_json(nlohmann::json::parse(text), cfg);
    } catch (const nlohmann::json::parse_error& e) {
      throw ConfigError("cannot parse " + f.config_file + ": " + e.what());
    }
  }
  if (const char* env = std::getenv("OPENRFT_SEED"); env && *env) {
    try {
      std::size_t used = 0;
      const auto s = std::stoull(env, &used);
      if (used != std::string(env).size()) throw std::invalid_argument(env);
      cfg.seeds = {s};
    } catch (const std::exception&) {
      throw ConfigError(std::string("OPENRFT_SEED is not an unsigned integer: ") + env);
    }
  }
  nlohmann::json over = nlohmann::json::object();
  if (f.method) over["method"] = *f.method;
  if (f.train_size) over["train_size"] = *f.train_size;
  if (f.test_size) over["test_size"] = *f.test_size;
  if (f.eval_repeats) over["eval_repeats"] = *f.eval_repeats;
  if (f.k) over["target"]["num_steps"] = *f.k;
  if (f.seeds) over["seeds"] = *f.seeds;
  if (f.alpha) over["reward"]["alpha"] = *f.alpha;
  if (f.rl_passes) over["rl_passes"] = *f.rl_passes;
  if (f.temperature) over["temperature"] = *f.temperature;
  if (f.output_dir) over["output_dir"] = *f.output_dir;
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects path=value, got '" + s + "'");
    set_path(over, s.substr(0, eq), parse_scalar(s.substr(eq + 1)));
  }
  cfg = experiment_config_from_json(over, cfg);
  cfg.validate();
  return cfg;
}

std::uint64_t master_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

void write_out(const std::string& path, const std::string& content) {
  if (path.empty() || path == "-") {
    std::cout << content;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  detail::write_file(p, content);
}

PolicyParams load_policy(const std::string& path, const ExperimentConfig& cfg) {
  return load_checkpoint(detail::read_file(path), PolicyDims::for_layout(cfg.layout(), cfg.hidden));
}

std::vector<Question> load_questions(const std::string& path, const ExperimentConfig& cfg) {
  return read_dataset(detail::read_file(path), cfg.target.value_bound);
}

std::vector<Method> parse_methods(const std::vector<std::string>& names) {
  std::vector<Method> out;
  for (const auto& n : names) out.push_back(parse_method(n));
  if (out.empty()) out.assign(kAllMethods.begin(), kAllMethods.end());
  return out;
}

void persist_failure(const RunFailure& e, const fs::path& dir) {
  emit_report(e.partial(), dir);
  detail::write_file(dir / "error.txt", std::string(e.what()) + '\n');
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"openrft: reinforcement fine-tuning laboratory on synthetic arithmetic chains"};
  app.require_subcommand(1);
  CommonFlags common;

  // gen
  auto* gen = app.add_subcommand("gen", "generate a dataset (JSON lines)");
  std::string gen_domain = "target", gen_out;
  int gen_k = 4, gen_count = 100;
  std::uint64_t gen_seed = 0;
  std::int64_t gen_id_base = 0;
  gen->add_option("--domain", gen_domain)->check(CLI::IsMember({"source", "target"}));
  gen->add_option("--k", gen_k);
  gen->add_option("--count", gen_count);
  gen->add_option("--seed", gen_seed);
  gen->add_option("--id-base", gen_id_base);
  gen->add_option("--out", gen_out);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "train the source-domain generalist");
  std::string pre_out;
  add_common(pre, common);
  pre->add_option("--out", pre_out)->required();

  // distill
  auto* dis = app.add_subcommand("distill", "synthesize reasoning traces by rejection sampling");
  std::string dis_policy, dis_data, dis_out;
  int dis_mismatch = 0;
  add_common(dis, common);
  dis->add_option("--policy", dis_policy, "teacher checkpoint (self-synthesis)");
  dis->add_option("--data", dis_data)->required();
  dis->add_option("--mismatched", dis_mismatch, "use the mismatched teacher with this granularity");
  dis->add_option("--out", dis_out);

  // sft
  auto* sft = app.add_subcommand("sft", "supervised fine-tuning on traces");
  std::string sft_policy, sft_data, sft_traces, sft_out;
  add_common(sft, common);
  sft->add_option("--policy", sft_policy)->required();
  sft->add_option("--data", sft_data)->required();
  sft->add_option("--traces", sft_traces)->required();
  sft->add_option("--out", sft_out)->required();

  // train
  auto* tr = app.add_subcommand("train", "PPO reinforcement fine-tuning");
  std::string tr_policy, tr_data, tr_out, tr_history;
  bool tr_augment = false;
  add_common(tr, common);
  tr->add_option("--policy", tr_policy)->required();
  tr->add_option("--data", tr_data)->required();
  tr->add_flag("--augment", tr_augment, "train on the augmented pool");
  tr->add_option("--out", tr_out)->required();
  tr->add_option("--history", tr_history, "per-iteration metrics (JSON lines)");

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string ev_policy, ev_data;
  add_common(ev, common);
  ev->add_option("--policy", ev_policy)->required();
  ev->add_option("--data", ev_data)->required();

  // matrix
  auto* mx = app.add_subcommand("matrix", "run the method comparison matrix");
  std::vector<std::string> mx_methods;
  add_common(mx, common);
  mx->add_option("--methods", mx_methods, "subset of methods (default: all)")->delimiter(',');

  // sweep
  auto* sw = app.add_subcommand("sweep", "data-scale sweep");
  std::vector<int> sw_sizes = kDefaultSweepSizes;
  int sw_sft = 100;
  add_common(sw, common);
  sw->add_option("--sizes", sw_sizes)->delimiter(',');
  sw->add_option("--sft-samples", sw_sft);

  // report
  auto* rp = app.add_subcommand("report", "aggregate emitted reports into one table");
  std::string rp_dir = "runs";
  std::optional<double> rp_min;
  std::vector<std::string> rp_check;
  rp->add_option("--dir", rp_dir);
  rp->add_option("--min-mean", rp_min, "exit 4 if any report mean is below this");
  rp->add_option("--check", rp_check, "exit 4 unless A > B for each pair A:B of methods")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) {
      TaskSpec spec = gen_domain == "source" ? TaskSpec::source(gen_k) : TaskSpec::target(gen_k);
      write_out(gen_out, write_dataset(generate_dataset(spec, gen_count, gen_seed, gen_id_base)));
      return kOk;
    }
    if (*rp) {
      std::vector<MetricsReport> reps;
      std::vector<fs::path> dirs;
      for (const auto& e : fs::recursive_directory_iterator(rp_dir))
        if (e.is_regular_file() && e.path().filename() == "metrics.jsonl") dirs.push_back(e.path().parent_path());
      std::sort(dirs.begin(), dirs.end());
      for (const auto& d : dirs) reps.push_back(load_report(d));
      if (reps.empty()) throw ConfigError("no metrics.jsonl under " + rp_dir);
      std::cout << summary_table(reps);
      int code = kOk;
      if (rp_min)
        for (const auto& r : reps)
          if (r.mean < *rp_min) {
            std::cerr << "below threshold: " << r.method << " " << r.task << " mean " << format_fixed(r.mean) << '\n';
            code = kThreshold;
          }
      for (const auto& pair : rp_check) {
        const auto colon = pair.find(':');
        if (colon == std::string::npos) throw ConfigError("--check expects A:B, got '" + pair + "'");
        const std::string a = pair.substr(0, colon), b = pair.substr(colon + 1);
        const auto find = [&](const std::string& m) {
          auto it = std::find_if(reps.begin(), reps.end(), [&](const MetricsReport& r) { return r.method == m; });
          if (it == reps.end()) throw ConfigError("no report for method " + m);
          return it->mean;
        };
        const bool ok = find(a) > find(b);
        std::cout << (ok ? "PASS " : "FAIL ") << a << " > " << b << '\n';
        if (!ok) code = kThreshold;
      }
      return code;
    }

    const ExperimentConfig cfg = resolve(common);
    const std::uint64_t seed = master_seed(cfg);
    const FeatureLayout layout = cfg.layout();
    const Env env = task_env(cfg.target, seed);

    if (*pre) {
      const auto res = pretrain_vanilla(cfg.source, seed, cfg.pretrain, layout, cfg.hidden);
      write_out(pre_out, save_checkpoint(res.params));
      std::cerr << "source accuracy " << format_fixed(res.source_accuracy) << " after " << res.epochs << " epochs\n";
      return kOk;
    }
    if (*dis) {
      const auto qs = load_questions(dis_data, cfg);
      ProcessDataset d;
      if (dis_mismatch > 0) {
        d = synthesize_mismatched(dis_mismatch, qs, env, derive_seed(seed, {0xC2}));
      } else {
        if (dis_policy.empty()) throw ConfigError("distill needs --policy or --mismatched");
        const auto p = load_policy(dis_policy, cfg);
        SynthesisConfig sc = cfg.synthesis;
        sc.seed = derive_seed(seed, {0xC1});
        d = synthesize_traces(NeuralChooser{&p, layout, cfg.temperature, nullptr}, qs, env, sc);
      }
      write_out(dis_out, write_process_dataset(d));
      return kOk;
    }
    if (*sft) {
      const auto p = load_policy(sft_policy, cfg);
      const auto qs = load_questions(sft_data, cfg);
      const auto traces = read_process_dataset(detail::read_file(sft_traces));
      SftConfig sc = cfg.sft;
      sc.shuffle_seed = derive_seed(seed, {0xC3, cfg.sft.shuffle_seed});
      const auto res = sft_train(p, layout, qs, env, traces, sc);
      for (std::size_t e = 0; e < res.epoch_losses.size(); ++e)
        std::cerr << "epoch " << e + 1 << " loss " << format_exact(res.epoch_losses[e]) << '\n';
      write_out(sft_out, save_checkpoint(res.params));
      return kOk;
    }
    if (*tr) {
      const auto p = load_policy(tr_policy, cfg);
      auto pool = load_questions(tr_data, cfg);
      if (tr_augment) pool = augment_dataset(pool, cfg.augment, derive_seed(seed, {0xC4}));
      PpoConfig pc = cfg.ppo;
      pc.temperature = cfg.temperature;
      pc.iterations = rl_iterations(cfg, pool.size());
      const auto res = train_rft(p, pool, layout, env, cfg.reward, pc, derive_seed(seed, {0xC5}));
      write_out(tr_out, save_checkpoint(res.params));
      if (!tr_history.empty()) write_out(tr_history, write_history(res.history));
      return kOk;
    }
    if (*ev) {
      const auto p = load_policy(ev_policy, cfg);
      const auto qs = load_questions(ev_data, cfg);
      const auto st = evaluate(p, layout, qs, env, cfg.eval_repeats, cfg.temperature, derive_seed(seed, {0xD1}));
      nlohmann::ordered_json j;
      j["per_repeat"] = st.per_repeat;
      j["mean"] = st.mean;
      std::cout << j.dump() << '\n';
      return kOk;
    }
    if (*mx) {
      VanillaCache cache;
      std::vector<MetricsReport> reps;
      const fs::path root = cfg.output_dir;
      for (Method m : parse_methods(mx_methods)) {
        ExperimentConfig c = cfg;
        c.method = m;
        const fs::path dir = root / (std::string(to_string(m)) + "-" + task_name(c.target));
        try {
          reps.push_back(run_method(c, cache));
        } catch (const RunFailure& e) {
          persist_failure(e, dir);
          std::cerr << e.what() << '\n';
          return e.numeric() ? kNumeric : kOther;
        }
        emit_report(reps.back(), dir);
        std::cerr << to_string(m) << ": mean " << format_fixed(reps.back().mean) << '\n';
      }
      const std::string table = summary_table(reps);
      fs::create_directories(root);
      detail::write_file(root / "summary.txt", table);
      std::cout << table;
      return kOk;
    }
    if (*sw) {
      const auto t = data_scale_sweep(cfg, sw_sizes, sw_sft);
      const fs::path root = cfg.output_dir;
      fs::create_directories(root);
      detail::write_file(root / "sweep.csv", sweep_csv(t.rows));
      detail::write_file(root / "sweep_baseline.csv", sweep_csv(t.baseline));
      for (Method m : kSweepMethods)
        for (int size : sw_sizes)
          std::cout << to_string(m) << ',' << size << ',' << format_fixed(sweep_mean(t, to_string(m), size)) << '\n';
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const RunFailure& e) {
    std::cerr << e.what() << '\n';
    return e.numeric() ? kNumeric : kOther;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kOther;
  }
  return kOther;
}
