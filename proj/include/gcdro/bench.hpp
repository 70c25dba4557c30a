#pragma once

// Experiment suites behind the command-line harness: JSON configuration,
// (method, seed) job execution, and CSV/JSON result files.

#include "gcdro/analysis.hpp"

#include "json.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

namespace gcdro::bench {

using nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kVersion = "0.1.0";

inline std::string build_id() {
  std::ostringstream os;
  os << "gcdro " << kVersion << " (" <<
#if defined(__clang__)
      "clang " << __clang_version__
#elif defined(__GNUC__)
      "gcc " << __VERSION__
#else
      "unknown compiler"
#endif
     << ", C++" << __cplusplus / 100 % 100 << ")";
  return os.str();
}

// ---------------------------------------------------------------------------
// Strict JSON field access

class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    require(j_.is_object(), ErrorKind::InvalidConfig, "config: '", at(), "' must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    require(j_.contains(key), ErrorKind::InvalidConfig, "config: missing field '", at(key), "'");
    return j_.at(key);
  }

  template <typename T>
  T get(const std::string& key) {
    const json& v = raw(key);
    try {
      if constexpr (std::is_same_v<T, std::uint64_t> || std::is_same_v<T, std::size_t>) {
        require(v.is_number_unsigned(), ErrorKind::InvalidConfig, "config: field '", at(key),
                "' must be a nonnegative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        require(v.is_number(), ErrorKind::InvalidConfig, "config: field '", at(key), "' must be a number");
      }
      return v.get<T>();
    } catch (const json::exception& e) {
      fail(ErrorKind::InvalidConfig, "config: field '", at(key), "': ", e.what());
    }
  }

  template <typename T>
  T get(const std::string& key, T fallback) {
    return has(key) ? get<T>(key) : fallback;
  }

  Fields child(const std::string& key) { return Fields(raw(key), at(key)); }

  std::string at(const std::string& key = {}) const {
    if (key.empty()) return path_.empty() ? "<root>" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items())
      require(used_.contains(key), ErrorKind::InvalidConfig, "config: unknown field '", at(key), "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Configuration

enum class ModelKind { Linear, Mlp };

struct ModelConfig {
  ModelKind kind = ModelKind::Linear;
  std::size_t hidden = 64;
  Activation activation = Activation::Relu;
};

struct GraphConfig {
  std::size_t k = 10;
  WeightScheme scheme = WeightScheme::Gaussian;
};

/// One configured method. Hyperparameters given as arrays span a grid; the
/// candidate with the lowest validation test-mean RMSE is used.
struct MethodEntry {
  std::string label;
  std::vector<MethodSpec> candidates;
  std::vector<json> candidate_params;
};

struct SensitivityConfig {
  std::string instance = "ring";  // "ring" or "benchmark"
  std::size_t ring_n = 24;
  std::size_t ring_hops = 4;
  double delta = 4.0;
  double beta = 1.0;
  std::vector<double> alpha_grid{0.1, 0.5, 1.0, 5.0, 10.0};
  std::optional<std::size_t> i;
  std::optional<std::size_t> j;
};

struct CsvBenchmark {
  RealDatasetSpec spec;
};

struct ExperimentConfig {
  std::variant<SimConfig, CsvBenchmark> benchmark;
  std::vector<MethodEntry> methods;
  GraphConfig graph;
  ModelConfig model;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0};
  std::string output_dir;
  std::uint64_t validation_offset = 1000;
  SensitivityConfig sensitivity;
  json source;  // the parsed document, for hashing

  bool is_simulation() const { return std::holds_alternative<SimConfig>(benchmark); }
};

namespace detail {

inline std::vector<double> number_list(Fields& f, const std::string& key) {
  const json& v = f.raw(key);
  require(v.is_array(), ErrorKind::InvalidConfig, "config: field '", f.at(key), "' must be an array");
  std::vector<double> out;
  for (const auto& x : v) {
    require(x.is_number(), ErrorKind::InvalidConfig, "config: field '", f.at(key), "' must hold numbers");
    out.push_back(x.get<double>());
  }
  return out;
}

inline SimConfig parse_sim(Fields f) {
  SimConfig c;
  c.n_major = f.get<std::size_t>("n_major", c.n_major);
  c.n_minor = f.get<std::size_t>("n_minor", c.n_minor);
  c.r_major = f.get<double>("r_major", c.r_major);
  c.r_minor = f.get<double>("r_minor", c.r_minor);
  if (f.has("test_rs")) c.test_rs = number_list(f, "test_rs");
  c.test_size = f.get<std::size_t>("test_size", c.test_size);
  c.noise_level = f.get<double>("noise_level", c.noise_level);
  if (f.has("theta_s")) {
    const auto t = number_list(f, "theta_s");
    c.theta_s = Eigen::Map<const Vector>(t.data(), static_cast<Eigen::Index>(t.size()));
  }
  c.label_noise_std_mode = f.get<bool>("label_noise_std_mode", c.label_noise_std_mode);
  c.target_noise_std = f.get<double>("target_noise_std", c.target_noise_std);
  if (f.has("laplace_scale")) {
    const auto rule = f.get<std::string>("laplace_scale");
    if (rule == "inverse_log") c.scale_rule = LaplaceScaleRule::InverseLog;
    else if (rule == "log_over_five") c.scale_rule = LaplaceScaleRule::LogOverFive;
    else fail(ErrorKind::InvalidConfig, "config: field '", f.at("laplace_scale"), "' must be inverse_log or log_over_five");
  }
  f.finish();
  c.validate();
  return c;
}

inline CsvBenchmark parse_csv(Fields f) {
  CsvBenchmark b;
  b.spec.csv_path = f.get<std::string>("csv_path");
  b.spec.target_column = f.get<std::string>("target_column");
  b.spec.feature_columns = f.get<std::vector<std::string>>("feature_columns");
  require(!(f.has("group_column") && f.has("group_bins")), ErrorKind::InvalidConfig,
          "config: give at most one of group_column and group_bins");
  if (f.has("group_column")) b.spec.group_rule = GroupByColumn{f.get<std::string>("group_column")};
  if (f.has("group_bins")) {
    Fields bins = f.child("group_bins");
    GroupByBins rule{bins.get<std::string>("column"), number_list(bins, "edges")};
    bins.finish();
    b.spec.group_rule = rule;
  }
  b.spec.standardize = f.get<bool>("standardize", false);
  b.spec.train_groups = f.get<std::vector<int>>("train_groups");
  require(!b.spec.train_groups.empty(), ErrorKind::InvalidConfig, "config: '", f.at("train_groups"),
          "' must list at least one group");
  f.finish();
  b.spec.validate();
  return b;
}

inline MethodSpec parse_method_scalar(const json& j, const std::string& path) {
  Fields f(j, path);
  const auto name = f.get<std::string>("name");
  f.raw("label");  // consumed by the caller
  MethodSpec spec;
  if (name == "ERM") {
    spec = Erm{};
  } else if (name == "KL-DRO") {
    spec = KlDro{f.get<double>("rho")};
  } else if (name == "chi2-DRO") {
    spec = Chi2Dro{f.get<double>("rho")};
  } else if (name == "GDRO") {
    Gdro m;
    m.beta = f.get<double>("beta", m.beta);
    m.t_in = f.get<std::size_t>("t_in", m.t_in);
    m.tau = f.get<double>("tau", m.tau);
    spec = m;
  } else if (name == "GCDRO") {
    Gcdro m;
    m.alpha = f.get<double>("alpha", m.alpha);
    m.beta = f.get<double>("beta", m.beta);
    m.t_in = f.get<std::size_t>("t_in", m.t_in);
    m.tau = f.get<double>("tau", m.tau);
    const auto mode = f.get<std::string>("theta_grad", "full");
    if (mode == "full") m.theta_grad = ThetaGrad::FullRisk;
    else if (mode == "weighted_only") m.theta_grad = ThetaGrad::WeightedOnly;
    else fail(ErrorKind::InvalidConfig, "config: field '", f.at("theta_grad"), "' must be full or weighted_only");
    spec = m;
  } else if (name == "DORO") {
    Doro m;
    m.drop_frac = f.get<double>("drop_frac", m.drop_frac);
    const auto inner = f.get<std::string>("inner", "chi2-DRO");
    const double rho = f.get<double>("rho", 0.1);
    if (inner == "chi2-DRO") m.inner = Chi2Dro{rho};
    else if (inner == "KL-DRO") m.inner = KlDro{rho};
    else fail(ErrorKind::InvalidConfig, "config: field '", f.at("inner"), "' must be chi2-DRO or KL-DRO");
    spec = m;
  } else {
    fail(ErrorKind::InvalidConfig, "config: field '", f.at("name"), "': unknown method '", name, "'");
  }
  f.finish();
  try {
    validate(spec);
  } catch (const Error& e) {
    fail(ErrorKind::InvalidConfig, "config: '", path, "': ", e.what());
  }
  return spec;
}

inline MethodEntry parse_method(const json& j, const std::string& path) {
  require(j.is_object(), ErrorKind::InvalidConfig, "config: '", path, "' must be an object");
  require(j.contains("name") && j["name"].is_string(), ErrorKind::InvalidConfig, "config: '", path,
          "' needs a string field 'name'");
  MethodEntry entry;
  entry.label = j.value("label", j["name"].get<std::string>());
  // Expand array-valued hyperparameters into the cartesian grid, in key order.
  std::vector<json> grid{j};
  for (const auto& [key, value] : j.items()) {
    if (!value.is_array()) continue;
    require(!value.empty(), ErrorKind::InvalidConfig, "config: grid '", path, ".", key, "' is empty");
    std::vector<json> next;
    for (const auto& partial : grid)
      for (const auto& v : value) {
        json c = partial;
        c[key] = v;
        next.push_back(std::move(c));
      }
    grid = std::move(next);
  }
  for (auto& c : grid) {
    c["label"] = entry.label;
    entry.candidates.push_back(parse_method_scalar(c, path));
    c.erase("label");
    c.erase("name");
    entry.candidate_params.push_back(c);
  }
  return entry;
}

}  // namespace detail

inline ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  cfg.source = doc;
  Fields root(doc, "");
  const auto version = root.get<std::size_t>("schema_version");
  require(version == kSchemaVersion, ErrorKind::InvalidConfig, "config: schema_version ", version,
          " is not supported (expected ", kSchemaVersion, ")");

  Fields bench = root.child("benchmark");
  const auto type = bench.get<std::string>("type");
  if (type == "simulation") {
    // Re-wrap without "type" so the strict reader sees only simulation keys.
    json sim = doc.at("benchmark");
    sim.erase("type");
    for (const auto& [key, value] : sim.items()) bench.raw(key);
    cfg.benchmark = detail::parse_sim(Fields(sim, "benchmark"));
  } else if (type == "csv") {
    json csv = doc.at("benchmark");
    csv.erase("type");
    for (const auto& [key, value] : csv.items()) bench.raw(key);
    cfg.benchmark = detail::parse_csv(Fields(csv, "benchmark"));
  } else {
    fail(ErrorKind::InvalidConfig, "config: field 'benchmark.type' must be simulation or csv, got '", type, "'");
  }
  bench.finish();

  const json& methods = root.raw("methods");
  require(methods.is_array() && !methods.empty(), ErrorKind::InvalidConfig, "config: 'methods' must be a nonempty array");
  std::set<std::string> labels;
  for (std::size_t m = 0; m < methods.size(); ++m) {
    auto entry = detail::parse_method(methods[m], "methods[" + std::to_string(m) + "]");
    require(labels.insert(entry.label).second, ErrorKind::InvalidConfig, "config: duplicate method label '",
            entry.label, "'");
    cfg.methods.push_back(std::move(entry));
  }

  if (root.has("graph")) {
    Fields g = root.child("graph");
    cfg.graph.k = g.get<std::size_t>("k", cfg.graph.k);
    const auto scheme = g.get<std::string>("scheme", "gaussian");
    if (scheme == "gaussian") cfg.graph.scheme = WeightScheme::Gaussian;
    else if (scheme == "binary") cfg.graph.scheme = WeightScheme::Binary;
    else fail(ErrorKind::InvalidConfig, "config: field 'graph.scheme' must be gaussian or binary");
    g.finish();
    require(cfg.graph.k >= 1, ErrorKind::InvalidConfig, "config: graph.k must be >= 1");
  }

  if (root.has("model")) {
    Fields m = root.child("model");
    const auto kind = m.get<std::string>("type", "linear");
    if (kind == "linear") cfg.model.kind = ModelKind::Linear;
    else if (kind == "mlp") cfg.model.kind = ModelKind::Mlp;
    else fail(ErrorKind::InvalidConfig, "config: field 'model.type' must be linear or mlp");
    cfg.model.hidden = m.get<std::size_t>("hidden", cfg.model.hidden);
    if (m.has("activation")) cfg.model.activation = parse_activation(m.get<std::string>("activation"));
    m.finish();
    require(cfg.model.hidden >= 1, ErrorKind::InvalidConfig, "config: model.hidden must be >= 1");
  }

  if (root.has("train")) {
    Fields t = root.child("train");
    cfg.train.epochs = t.get<std::size_t>("epochs", cfg.train.epochs);
    cfg.train.lr = t.get<double>("lr", cfg.train.lr);
    cfg.train.warm_start = t.get<bool>("warm_start", cfg.train.warm_start);
    cfg.train.record_every = t.get<std::size_t>("record_every", cfg.train.record_every);
    t.finish();
    try {
      cfg.train.validate();
    } catch (const Error& e) {
      fail(ErrorKind::InvalidConfig, "config: 'train': ", e.what());
    }
  }

  if (root.has("seeds")) cfg.seeds = root.get<std::vector<std::uint64_t>>("seeds");
  require(!cfg.seeds.empty(), ErrorKind::InvalidConfig, "config: 'seeds' must be nonempty");
  cfg.output_dir = root.get<std::string>("output_dir", "");
  cfg.validation_offset = root.get<std::uint64_t>("validation_stream_offset", cfg.validation_offset);

  if (root.has("sensitivity")) {
    Fields s = root.child("sensitivity");
    auto& sc = cfg.sensitivity;
    sc.instance = s.get<std::string>("instance", sc.instance);
    require(sc.instance == "ring" || sc.instance == "benchmark", ErrorKind::InvalidConfig,
            "config: 'sensitivity.instance' must be ring or benchmark");
    sc.ring_n = s.get<std::size_t>("ring_n", sc.ring_n);
    sc.ring_hops = s.get<std::size_t>("ring_hops", sc.ring_hops);
    sc.delta = s.get<double>("delta", sc.delta);
    sc.beta = s.get<double>("beta", sc.beta);
    if (s.has("alpha_grid")) sc.alpha_grid = detail::number_list(s, "alpha_grid");
    if (s.has("i")) sc.i = s.get<std::size_t>("i");
    if (s.has("j")) sc.j = s.get<std::size_t>("j");
    s.finish();
    require(sc.ring_n >= 4 && sc.beta > 0.0 && sc.delta >= 0.0, ErrorKind::InvalidConfig,
            "config: sensitivity needs ring_n >= 4, beta > 0, delta >= 0");
    require(sc.ring_hops >= 1 && 2 * sc.ring_hops < sc.ring_n, ErrorKind::InvalidConfig,
            "config: 'sensitivity.ring_hops' must be in [1, ring_n/2)");
  }
  root.finish();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open config '", path, "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into a line number.
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    fail(ErrorKind::Parse, "config '", path, "' line ", line, ": ", e.what());
  }
  return parse_config(doc);
}

inline std::uint64_t config_hash(const ExperimentConfig& cfg) { return fnv1a(cfg.source.dump()); }

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  Dataset train;
  std::vector<TestSplit> tests;
  std::vector<TestSplit> validation;  // held-out splits for grid selection
  std::optional<Vector> theta_star;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg, std::uint64_t seed) {
  PreparedData out;
  if (const auto* sim = std::get_if<SimConfig>(&cfg.benchmark)) {
    SimConfig c = *sim;
    c.seed = seed;
    Benchmark b = make_benchmark(c);
    out.train = std::move(b.train);
    out.tests = std::move(b.tests);
    out.validation = make_benchmark(c, cfg.validation_offset).tests;
    out.theta_star = c.theta_star();
    return out;
  }
  // CSV: training groups form the training set; each remaining group is a
  // test split labelled by its group id. There is no independent held-out
  // data, so grids are selected on the test splits.
  const auto& spec = std::get<CsvBenchmark>(cfg.benchmark).spec;
  const Dataset all = load_csv(spec);
  const std::set<int> train_groups(spec.train_groups.begin(), spec.train_groups.end());
  std::vector<std::size_t> train_rows;
  std::map<int, std::vector<std::size_t>> test_rows;
  for (std::size_t i = 0; i < all.n(); ++i) {
    if (train_groups.contains(all.group_id[i])) train_rows.push_back(i);
    else test_rows[all.group_id[i]].push_back(i);
  }
  require(!train_rows.empty(), ErrorKind::EmptySelection, "no rows belong to the training groups");
  require(!test_rows.empty(), ErrorKind::EmptySelection, "no rows outside the training groups to test on");
  out.train = all.subset(train_rows);
  for (const auto& [gid, rows] : test_rows) out.tests.push_back({static_cast<double>(gid), all.subset(rows)});
  out.validation = out.tests;
  return out;
}

inline ModelParams initial_model(const ExperimentConfig& cfg, std::size_t d, std::uint64_t seed) {
  if (cfg.model.kind == ModelKind::Linear) return make_linear(d);
  Rng rng = make_rng(seed, 0x6d6f64656cULL);
  return make_mlp(d, cfg.model.hidden, rng, cfg.model.activation);
}

// ---------------------------------------------------------------------------
// Running

struct RunResult {
  std::string label;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RegressionMetrics metrics;
  double param_err = std::numeric_limits<double>::quiet_NaN();
  double wall_time_s = 0.0;
  json selected;                 // chosen hyperparameters
  json selection_scores;         // candidate -> validation test mean
  TrainedModel model;
  GroupWeightSummary groups;
};

struct SeedContext {
  PreparedData data;
  std::optional<Graph> graph;
};

inline SeedContext make_context(const ExperimentConfig& cfg, std::uint64_t seed) {
  SeedContext ctx{prepare_data(cfg, seed), std::nullopt};
  const bool graphs = std::any_of(cfg.methods.begin(), cfg.methods.end(), [](const MethodEntry& m) {
    return std::any_of(m.candidates.begin(), m.candidates.end(), needs_graph);
  });
  if (graphs) ctx.graph = build_knn(ctx.data.train.X, cfg.graph.k, cfg.graph.scheme);
  return ctx;
}

inline RunResult run_one(const ExperimentConfig& cfg, const MethodEntry& entry, std::uint64_t seed, const SeedContext& ctx) {
  RunResult r;
  r.label = entry.label;
  r.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    const ModelParams init = initial_model(cfg, ctx.data.train.d(), seed);
    const Graph* g = ctx.graph ? &*ctx.graph : nullptr;
    std::size_t best = 0;
    std::optional<TrainedModel> best_model;
    if (entry.candidates.size() > 1) {
      double best_score = std::numeric_limits<double>::infinity();
      r.selection_scores = json::array();
      for (std::size_t c = 0; c < entry.candidates.size(); ++c) {
        TrainedModel m = train(entry.candidates[c], init, ctx.data.train, g, tc);
        const double score = regression_metrics(m.params, ctx.data.validation).mean;
        r.selection_scores.push_back({{"params", entry.candidate_params[c]}, {"validation_test_mean", score}});
        if (score < best_score) {
          best_score = score;
          best = c;
          best_model = std::move(m);
        }
      }
    } else {
      best_model = train(entry.candidates[0], init, ctx.data.train, g, tc);
    }
    r.selected = entry.candidate_params[best];
    r.model = std::move(*best_model);
    r.metrics = regression_metrics(r.model.params, ctx.data.tests);
    if (ctx.data.theta_star && std::holds_alternative<LinearModel>(r.model.params))
      r.param_err = param_error(r.model.params, *ctx.data.theta_star);
    r.groups = group_mass(r.model.final_q, ctx.data.train);
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  r.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

/// Runs every (method, seed) job on up to `jobs` threads. Results come back
/// ordered by (method position in the config, seed position).
inline std::vector<RunResult> run_suite(const ExperimentConfig& cfg, std::size_t jobs,
                                        const std::vector<std::string>& only = {}) {
  std::vector<const MethodEntry*> methods;
  for (const auto& m : cfg.methods)
    if (only.empty() || std::find(only.begin(), only.end(), m.label) != only.end()) methods.push_back(&m);
  require(!methods.empty(), ErrorKind::InvalidConfig, "no configured method matches the selection");

  // Per-seed data and graph, built lazily and shared by that seed's jobs.
  std::vector<std::optional<SeedContext>> contexts(cfg.seeds.size());
  std::vector<std::once_flag> once(cfg.seeds.size());
  std::vector<std::string> context_error(cfg.seeds.size());

  const std::size_t total = methods.size() * cfg.seeds.size();
  std::vector<RunResult> results(total);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t job = next++; job < total; job = next++) {
      const std::size_t m = job / cfg.seeds.size(), s = job % cfg.seeds.size();
      std::call_once(once[s], [&] {
        try {
          contexts[s] = make_context(cfg, cfg.seeds[s]);
        } catch (const std::exception& e) {
          context_error[s] = e.what();
        }
      });
      if (!contexts[s]) {
        results[job].label = methods[m]->label;
        results[job].seed = cfg.seeds[s];
        results[job].error = context_error[s];
        continue;
      }
      results[job] = run_one(cfg, *methods[m], cfg.seeds[s], *contexts[s]);
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(jobs, total));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return results;
}

// ---------------------------------------------------------------------------
// Output

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::Io, "cannot create directory '", dir.string(), "': ", ec.message());
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::Io, "cannot write '", path.string(), "'");
  return out;
}

inline std::string fmt(double v) { return gcdro::format_real(v); }

inline std::string split_name(double r) {
  std::ostringstream os;
  os << r;
  return os.str();
}

inline std::string file_stem(const std::string& label) {
  std::string s;
  for (char c : label) s += std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_';
  return s;
}

inline void write_manifest(const ExperimentConfig& cfg, const fs::path& dir, const std::string& command,
                           const json& extra = json::object()) {
  json m;
  m["command"] = command;
  char hash[17];
  std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash(cfg)));
  m["config_hash"] = std::string(hash);
  m["seeds"] = cfg.seeds;
  m["build"] = build_id();
  m["prng"] = kRngName;
  m["schema_version"] = kSchemaVersion;
  m["model_selection"] = cfg.is_simulation()
      ? "grids selected by lowest mean test RMSE on independently drawn validation splits of the same seed"
      : "grids selected by lowest mean RMSE on the test splits themselves (no independent validation data)";
  m["test_std_convention"] = "population (divide by number of test splits)";
  for (const auto& [k, v] : extra.items()) m[k] = v;
  open_out(dir / "manifest.json") << m.dump(2) << "\n";
}

inline json method_json(const MethodSpec& spec) {
  return std::visit([](const auto& m) -> json {
    using M = std::decay_t<decltype(m)>;
    if constexpr (std::is_same_v<M, Erm>) return {{"name", "ERM"}};
    else if constexpr (std::is_same_v<M, KlDro>) return {{"name", "KL-DRO"}, {"rho", m.rho}};
    else if constexpr (std::is_same_v<M, Chi2Dro>) return {{"name", "chi2-DRO"}, {"rho", m.rho}};
    else if constexpr (std::is_same_v<M, Gdro>) return {{"name", "GDRO"}, {"beta", m.beta}, {"t_in", m.t_in}, {"tau", m.tau}};
    else if constexpr (std::is_same_v<M, Gcdro>)
      return {{"name", "GCDRO"}, {"alpha", m.alpha}, {"beta", m.beta}, {"t_in", m.t_in}, {"tau", m.tau},
              {"theta_grad", m.theta_grad == ThetaGrad::FullRisk ? "full" : "weighted_only"}};
    else {
      const bool kl = std::holds_alternative<KlDro>(m.inner);
      const double rho = kl ? std::get<KlDro>(m.inner).rho : std::get<Chi2Dro>(m.inner).rho;
      return {{"name", "DORO"}, {"drop_frac", m.drop_frac}, {"inner", kl ? "KL-DRO" : "chi2-DRO"}, {"rho", rho}};
    }
  }, spec);
}

inline json group_json(const GroupWeightSummary& g) {
  json j;
  json groups = json::object();
  for (const auto& [id, m] : g.group) groups[std::to_string(id)] = m;
  j["groups"] = groups;
  j["noise"] = g.noise;
  return j;
}

inline std::vector<double> split_rs(const std::vector<RunResult>& results) {
  for (const auto& r : results)
    if (r.ok) return r.metrics.r;
  return {};
}

inline void write_results(const std::vector<RunResult>& results, const fs::path& dir) {
  const auto rs = split_rs(results);
  auto csv = open_out(dir / "results.csv");
  csv << "method,seed";
  for (double r : rs) csv << ",rmse_" << split_name(r);
  csv << ",test_mean,test_std,param_error,wall_time_s\n";

  auto row = [&](const std::string& label, const std::string& seed, const std::vector<double>& rmse, double mean,
                 double std, double perr, double wall) {
    csv << label << "," << seed;
    for (double v : rmse) csv << "," << fmt(v);
    csv << "," << fmt(mean) << "," << fmt(std) << "," << fmt(perr) << "," << fmt(wall) << "\n";
  };

  std::vector<std::string> order;
  for (const auto& r : results)
    if (std::find(order.begin(), order.end(), r.label) == order.end()) order.push_back(r.label);
  for (const auto& label : order) {
    std::vector<double> sum(rs.size(), 0.0);
    double mean = 0.0, std = 0.0, perr = 0.0, wall = 0.0;
    std::size_t k = 0;
    for (const auto& r : results) {
      if (r.label != label || !r.ok) continue;
      row(r.label, std::to_string(r.seed), r.metrics.rmse, r.metrics.mean, r.metrics.std, r.param_err, r.wall_time_s);
      for (std::size_t t = 0; t < rs.size(); ++t) sum[t] += r.metrics.rmse[t];
      mean += r.metrics.mean;
      std += r.metrics.std;
      perr += r.param_err;
      wall += r.wall_time_s;
      ++k;
    }
    if (k == 0) continue;
    const double kd = static_cast<double>(k);
    for (auto& v : sum) v /= kd;
    row(label, "mean", sum, mean / kd, std / kd, perr / kd, wall / kd);
  }

  json all = json::array();
  for (const auto& r : results) {
    json j;
    j["method"] = r.label;
    j["seed"] = r.seed;
    j["ok"] = r.ok;
    if (!r.ok) {
      j["error"] = r.error;
      all.push_back(j);
      continue;
    }
    j["selected"] = r.selected;
    if (!r.selection_scores.is_null()) j["selection"] = r.selection_scores;
    j["test_r"] = r.metrics.r;
    j["rmse"] = r.metrics.rmse;
    j["test_mean"] = r.metrics.mean;
    j["test_std"] = r.metrics.std;
    j["param_error"] = std::isfinite(r.param_err) ? json(r.param_err) : json(nullptr);
    j["wall_time_s"] = r.wall_time_s;
    j["group_mass"] = group_json(r.groups);
    all.push_back(j);
  }
  open_out(dir / "results.json") << all.dump(2) << "\n";
}

inline void write_traces(const std::vector<RunResult>& results, const fs::path& dir) {
  ensure_dir(dir / "traces");
  for (const auto& r : results) {
    if (!r.ok) continue;
    const std::string stem = file_stem(r.label) + "_seed" + std::to_string(r.seed);
    auto out = open_out(dir / "traces" / (stem + ".jsonl"));
    for (const auto& t : r.model.trace) {
      json j{{"epoch", t.epoch},   {"risk", t.risk},     {"weighted_loss", t.weighted_loss}, {"tv", t.tv},
             {"entropy", t.entropy}, {"action", t.action}, {"grad_norm", t.grad_norm}};
      out << j.dump() << "\n";
    }
    if (r.model.final_flow.empty()) continue;
    auto flow = open_out(dir / "traces" / (stem + "_flow.csv"));
    flow << "step,tau_eff,risk,action,min_q,max_q\n";
    for (const auto& f : r.model.final_flow)
      flow << f.step << "," << fmt(f.tau_eff) << "," << fmt(f.risk) << "," << fmt(f.action) << "," << fmt(f.min_q)
           << "," << fmt(f.max_q) << "\n";
  }
}

inline void write_weights(const RunResult& r, const Dataset& train, const fs::path& dir) {
  const std::string stem = file_stem(r.label) + "_seed" + std::to_string(r.seed);
  auto out = open_out(dir / ("weights_" + stem + ".csv"));
  out << "index,q,group_id,noise_flag,loss\n";
  for (std::size_t i = 0; i < train.n(); ++i) {
    const auto k = static_cast<Eigen::Index>(i);
    out << i << "," << fmt(r.model.final_q[k]) << "," << train.group_id[i] << "," << int(train.noise_flag[i]) << ","
        << fmt(r.model.final_losses[k]) << "\n";
  }
  open_out(dir / ("group_mass_" + stem + ".json")) << group_json(r.groups).dump(2) << "\n";
  auto csv = open_out(dir / ("group_mass_" + stem + ".csv"));
  csv << "group_id,mass\n";
  for (const auto& [id, m] : r.groups.group) csv << id << "," << fmt(m) << "\n";
  csv << "noise," << fmt(r.groups.noise) << "\n";
}

inline json dataset_metadata(const ExperimentConfig& cfg, std::uint64_t seed, const Dataset& train) {
  json m;
  m["seed"] = seed;
  m["prng"] = kRngName;
  if (const auto* sim = std::get_if<SimConfig>(&cfg.benchmark)) {
    m["theta_s"] = std::vector<double>(sim->theta_s.data(), sim->theta_s.data() + sim->theta_s.size());
    m["noise_level"] = sim->noise_level;
    m["r_major"] = sim->r_major;
    m["r_minor"] = sim->r_minor;
    m["test_rs"] = sim->test_rs;
    m["n_major"] = sim->n_major;
    m["n_minor"] = sim->n_minor;
    m["test_size"] = sim->test_size;
    m["target_noise_std"] = sim->target_noise_std;
    m["laplace_scale"] = sim->scale_rule == LaplaceScaleRule::InverseLog ? "inverse_log" : "log_over_five";
  }
  std::vector<std::size_t> noisy;
  for (std::size_t i = 0; i < train.n(); ++i)
    if (train.noise_flag[i]) noisy.push_back(i);
  m["noisy_indices"] = noisy;
  m["noisy_count"] = noisy.size();
  return m;
}

// ---------------------------------------------------------------------------
// Sensitivity study

/// Circulant ring with a smooth loss profile: node i links to i +- 1..hops at
/// unit weight. Used as the default assumption-satisfying instance. With
/// hops = 1 a spiked node can keep its mass by starving its two neighbours,
/// so the study defaults to a wider neighbourhood.
struct LossInstance {
  LossVector ell;
  Graph graph;
};

inline LossInstance ring_instance(std::size_t n, std::size_t hops = 1) {
  require(n >= 4, ErrorKind::InvalidConfig, "ring instance needs n >= 4");
  require(hops >= 1 && 2 * hops < n, ErrorKind::InvalidConfig, "ring hops must be in [1, n/2)");
  std::vector<Edge> und;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 1; d <= hops; ++d) und.push_back({i, (i + d) % n, 1.0});
  LossInstance inst{Vector(static_cast<Eigen::Index>(n)), Graph::from_undirected(n, und, 0.0, 2, WeightScheme::Binary)};
  for (std::size_t i = 0; i < n; ++i)
    inst.ell[static_cast<Eigen::Index>(i)] = 1.0 + 0.25 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return inst;
}

inline json report_json(const SensitivityReport& r, std::optional<double> alpha) {
  json j{{"method", r.method},
         {"i", r.i},
         {"j", r.j},
         {"delta", r.delta},
         {"gamma", r.gamma},
         {"gamma_noisy", r.gamma_noisy},
         {"xi", r.xi},
         {"assumption_satisfied", r.assumption_satisfied},
         {"neighbour_mean_loss", r.neighbour_mean_loss}};
  if (alpha) j["alpha"] = *alpha;
  return j;
}

inline json sensitivity_study(const LossVector& ell, const Graph& g, const SensitivityConfig& sc) {
  const std::size_t i = sc.i.value_or(0);
  const double beta = sc.beta;
  json out;
  out["beta"] = beta;
  out["reference_rule"] = sc.j ? "configured" : "median loss";
  const auto gd = sensitivity(ell, i, sc.delta, Gdro{beta, 1, 0.05}, &g, sc.j);
  out["GDRO"] = report_json(gd, std::nullopt);
  out["xi_gdro_closed_form"] = sc.delta / beta;
  // KL-DRO at multiplier lambda = beta: q proportional to exp(l / beta).
  {
    LossVector noisy = ell;
    noisy[static_cast<Eigen::Index>(i)] += sc.delta;
    const Vector q = softmax(ell / beta), qn = softmax(noisy / beta);
    const auto I = static_cast<Eigen::Index>(i), J = static_cast<Eigen::Index>(gd.j);
    out["xi_kl_at_lambda_beta"] = std::log(qn[I] / qn[J]) - std::log(q[I] / q[J]);
  }
  json rows = json::array();
  for (double a : sc.alpha_grid) {
    Gcdro m;
    m.alpha = a;
    m.beta = beta;
    rows.push_back(report_json(sensitivity(ell, i, sc.delta, m, &g, sc.j), a));
  }
  out["GCDRO"] = rows;
  return out;
}

}  // namespace gcdro::bench
