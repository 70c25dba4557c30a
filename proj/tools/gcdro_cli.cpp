// gcdro: command-line harness for the simulation benchmark, worst-case
// weight dumps and the sensitivity study.

#include "gcdro/bench.hpp"

#include "CLI11.hpp"

#include <cstdlib>
#include <iostream>

namespace {

using namespace gcdro;
using namespace gcdro::bench;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitPartial = 4;

struct Options {
  std::string config;
  std::string out;
  std::string seeds;
  std::size_t jobs = 1;
  std::vector<std::string> methods;
};

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
    require(ec == std::errc() && p == item.data() + item.size() && !item.empty(), ErrorKind::InvalidConfig,
            "--seeds: '", item, "' is not a nonnegative integer");
    out.push_back(v);
  }
  require(!out.empty(), ErrorKind::InvalidConfig, "--seeds: empty list");
  return out;
}

ExperimentConfig load(const Options& opt) {
  ExperimentConfig cfg = load_config(opt.config);
  if (!opt.seeds.empty()) cfg.seeds = parse_seeds(opt.seeds);
  return cfg;
}

fs::path output_dir(const Options& opt, const ExperimentConfig& cfg) {
  if (!opt.out.empty()) return opt.out;
  if (!cfg.output_dir.empty()) return cfg.output_dir;
  if (const char* env = std::getenv("GCDRO_OUT_DIR"); env && *env) return env;
  fail(ErrorKind::InvalidConfig, "no output directory: pass --out, set output_dir, or set GCDRO_OUT_DIR");
}

int count_failures(const std::vector<RunResult>& results) {
  int failed = 0;
  for (const auto& r : results)
    if (!r.ok) {
      std::cerr << "run " << r.label << " seed " << r.seed << " failed: " << r.error << "\n";
      ++failed;
    }
  return failed;
}

int suite_status(int failed, std::size_t total) {
  if (failed == 0) return kExitOk;
  return static_cast<std::size_t>(failed) == total ? kExitRuntime : kExitPartial;
}

int cmd_simulate(const Options& opt) {
  const ExperimentConfig cfg = load(opt);
  require(cfg.is_simulation(), ErrorKind::InvalidConfig, "simulate needs a simulation benchmark");
  const fs::path dir = output_dir(opt, cfg);
  ensure_dir(dir);
  for (std::uint64_t seed : cfg.seeds) {
    SimConfig sim = std::get<SimConfig>(cfg.benchmark);
    sim.seed = seed;
    const Benchmark b = make_benchmark(sim);
    const fs::path sub = dir / ("seed_" + std::to_string(seed));
    ensure_dir(sub);
    write_csv(b.train, (sub / "train.csv").string());
    for (const auto& t : b.tests) write_csv(t.data, (sub / ("test_r" + split_name(t.r) + ".csv")).string());
    open_out(sub / "metadata.json") << dataset_metadata(cfg, seed, b.train).dump(2) << "\n";
    std::cout << "seed " << seed << ": " << b.train.n() << " training rows, " << b.tests.size() << " test splits -> "
              << sub.string() << "\n";
  }
  write_manifest(cfg, dir, "simulate");
  return kExitOk;
}

int cmd_bench(const Options& opt) {
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = output_dir(opt, cfg);
  ensure_dir(dir);
  const auto results = run_suite(cfg, opt.jobs, opt.methods);
  write_results(results, dir);
  write_traces(results, dir);
  json methods = json::object();
  for (const auto& r : results)
    if (r.ok && !methods.contains(r.label)) methods[r.label] = r.selected;
  write_manifest(cfg, dir, "bench", {{"selected_hyperparameters_first_seed", methods}});
  for (const auto& r : results)
    if (r.ok)
      std::cout << r.label << " seed " << r.seed << ": test mean " << r.metrics.mean << ", test std " << r.metrics.std
                << ", param error " << r.param_err << " (" << r.wall_time_s << " s)\n";
  return suite_status(count_failures(results), results.size());
}

int cmd_weights(const Options& opt) {
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = output_dir(opt, cfg);
  ensure_dir(dir);
  const auto results = run_suite(cfg, opt.jobs, opt.methods);
  auto summary = open_out(dir / "weights_summary.csv");
  summary << "method,seed,group_id,mass\n";
  for (const auto& r : results) {
    if (!r.ok) continue;
    // The training set is deterministic given the seed, so rebuild it for the dump.
    const PreparedData data = prepare_data(cfg, r.seed);
    write_weights(r, data.train, dir);
    for (const auto& [id, m] : r.groups.group) summary << r.label << "," << r.seed << "," << id << "," << fmt(m) << "\n";
    summary << r.label << "," << r.seed << ",noise," << fmt(r.groups.noise) << "\n";
    std::cout << r.label << " seed " << r.seed << ": noise mass " << r.groups.noise;
    for (const auto& [id, m] : r.groups.group) std::cout << ", group " << id << " mass " << m;
    std::cout << "\n";
  }
  write_manifest(cfg, dir, "weights");
  return suite_status(count_failures(results), results.size());
}

int cmd_sensitivity(const Options& opt) {
  const ExperimentConfig cfg = load(opt);
  const fs::path dir = output_dir(opt, cfg);
  ensure_dir(dir);
  const auto& sc = cfg.sensitivity;
  json out;
  if (sc.instance == "ring") {
    const LossInstance inst = ring_instance(sc.ring_n, sc.ring_hops);
    out["instance"] = "ring";
    out["n"] = sc.ring_n;
    out["hops"] = sc.ring_hops;
    out["study"] = sensitivity_study(inst.ell, inst.graph, sc);
  } else {
    out["instance"] = "benchmark";
    json per_seed = json::array();
    for (std::uint64_t seed : cfg.seeds) {
      const PreparedData data = prepare_data(cfg, seed);
      const Graph g = build_knn(data.train.X, cfg.graph.k, cfg.graph.scheme);
      TrainConfig tc = cfg.train;
      tc.seed = seed;
      // Losses at a fixed theta: the ERM fit.
      const TrainedModel erm = train(Erm{}, initial_model(cfg, data.train.d(), seed), data.train, nullptr, tc);
      const LossVector ell = per_sample_loss(erm.params, data.train);
      SensitivityConfig local = sc;
      if (!local.i) {
        // First clean sample.
        std::size_t i = 0;
        while (i < data.train.n() && data.train.noise_flag[i]) ++i;
        local.i = i;
      }
      per_seed.push_back({{"seed", seed}, {"study", sensitivity_study(ell, g, local)}});
    }
    out["seeds"] = per_seed;
  }
  open_out(dir / "sensitivity.json") << out.dump(2) << "\n";
  write_manifest(cfg, dir, "sensitivity");
  std::cout << "wrote " << (dir / "sensitivity.json").string() << "\n";
  return kExitOk;
}

int cmd_validate(const Options& opt) {
  const ExperimentConfig cfg = load(opt);
  std::size_t runs = 0;
  for (const auto& m : cfg.methods) runs += m.candidates.size();
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  std::cout << "ok: " << cfg.methods.size() << " methods (" << runs << " trainings per seed), " << cfg.seeds.size()
            << " seeds, config hash " << hash << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometry-calibrated DRO benchmark harness"};
  app.require_subcommand(1);
  Options opt;

  auto add_common = [&](CLI::App* sub, bool runs) {
    sub->add_option("--config", opt.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--seeds", opt.seeds, "comma-separated seed list overriding the config");
    if (runs) {
      sub->add_option("--out", opt.out, "output directory (falls back to output_dir, then GCDRO_OUT_DIR)");
      sub->add_option("--jobs", opt.jobs, "parallel (method, seed) jobs")->check(CLI::PositiveNumber);
    }
  };
  auto* simulate = app.add_subcommand("simulate", "write the simulated train/test splits as CSV");
  add_common(simulate, true);
  auto* bench = app.add_subcommand("bench", "train every method on every seed and tabulate test RMSE");
  add_common(bench, true);
  bench->add_option("--method", opt.methods, "restrict to these method labels");
  auto* weights = app.add_subcommand("weights", "dump worst-case sample weights and group masses");
  add_common(weights, true);
  weights->add_option("--method", opt.methods, "restrict to these method labels");
  auto* sens = app.add_subcommand("sensitivity", "sample-weight sensitivity study over an alpha grid");
  add_common(sens, true);
  auto* validate = app.add_subcommand("validate-config", "parse and check a config without running it");
  add_common(validate, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*simulate) return cmd_simulate(opt);
    if (*bench) return cmd_bench(opt);
    if (*weights) return cmd_weights(opt);
    if (*sens) return cmd_sensitivity(opt);
    if (*validate) return cmd_validate(opt);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    switch (e.kind()) {
      case ErrorKind::InvalidConfig:
      case ErrorKind::Parse:
      case ErrorKind::MissingColumn:
        return kExitConfig;
      default:
        return kExitRuntime;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
