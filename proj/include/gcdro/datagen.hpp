#pragma once

// Simulation benchmark with sub-population shift and label noise, plus CSV
// ingestion/export of tabular datasets.
//
// Covariates are X = [S(5), U(4), V(1)]:
//   [S, U] ~ N(0, 2 I_9)
//   Y      = theta_S' S + 0.1 S1 S2 S3 + N(0, target_noise_std^2)
//   V      ~ Laplace(sign(r) Y, scale(r))
// where scale(r) = 1 / (5 ln|r|) by default, so larger |r| means a tighter
// (stronger) spurious V-Y correlation.

#include "gcdro/core.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace gcdro {

inline constexpr std::size_t kStableDim = 5;
inline constexpr std::size_t kIrrelevantDim = 4;
inline constexpr std::size_t kSimDim = kStableDim + kIrrelevantDim + 1;

struct Dataset {
  Matrix X;
  Vector y;
  std::vector<int> group_id;
  std::vector<std::uint8_t> noise_flag;

  std::size_t n() const { return static_cast<std::size_t>(y.size()); }
  std::size_t d() const { return static_cast<std::size_t>(X.cols()); }

  void validate() const {
    require(static_cast<std::size_t>(X.rows()) == n() && group_id.size() == n() &&
                noise_flag.size() == n(),
            ErrorKind::DimensionMismatch, "dataset row counts differ: X=", X.rows(), " y=", n(),
            " group_id=", group_id.size(), " noise_flag=", noise_flag.size());
    require(X.allFinite() && y.allFinite(), ErrorKind::Numerical, "dataset has non-finite entries");
  }

  std::size_t noisy_count() const {
    return static_cast<std::size_t>(std::count(noise_flag.begin(), noise_flag.end(), 1));
  }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.X.resize(static_cast<Eigen::Index>(rows.size()), X.cols());
    out.y.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      out.X.row(static_cast<Eigen::Index>(r)) = X.row(static_cast<Eigen::Index>(rows[r]));
      out.y[static_cast<Eigen::Index>(r)] = y[static_cast<Eigen::Index>(rows[r])];
      out.group_id.push_back(group_id[rows[r]]);
      out.noise_flag.push_back(noise_flag[rows[r]]);
    }
    return out;
  }
};

inline Dataset concat(const Dataset& a, const Dataset& b) {
  require(a.d() == b.d(), ErrorKind::DimensionMismatch, "concat: feature dims ", a.d(), " vs ", b.d());
  Dataset out;
  out.X.resize(a.X.rows() + b.X.rows(), a.X.cols());
  out.X << a.X, b.X;
  out.y.resize(a.y.size() + b.y.size());
  out.y << a.y, b.y;
  out.group_id = a.group_id;
  out.group_id.insert(out.group_id.end(), b.group_id.begin(), b.group_id.end());
  out.noise_flag = a.noise_flag;
  out.noise_flag.insert(out.noise_flag.end(), b.noise_flag.begin(), b.noise_flag.end());
  return out;
}

inline double sample_std(const Vector& v) {
  if (v.size() < 2) return 0.0;
  const double mean = v.mean();
  return std::sqrt((v.array() - mean).square().sum() / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Simulation

enum class LaplaceScaleRule { InverseLog, LogOverFive };

struct GenOptions {
  double target_noise_std = 0.5;
  LaplaceScaleRule scale_rule = LaplaceScaleRule::InverseLog;
  int group = 0;
};

inline double laplace_scale(double r, LaplaceScaleRule rule = LaplaceScaleRule::InverseLog) {
  require(std::isfinite(r) && std::abs(r) > 1.0, ErrorKind::InvalidConfig,
          "adjustment factor r must satisfy |r| > 1, got ", r);
  const double lr = std::log(std::abs(r));
  return rule == LaplaceScaleRule::InverseLog ? 1.0 / (5.0 * lr) : lr / 5.0;
}

inline Vector default_theta_s() { return Vector::Constant(kStableDim, 1.0 / std::sqrt(5.0)); }

inline Dataset gen_subpopulation(double r, std::size_t n, const Vector& theta_s, Rng& rng,
                                 const GenOptions& opt = {}) {
  require(n >= 1, ErrorKind::InvalidConfig, "gen_subpopulation: n must be >= 1");
  require(theta_s.size() == static_cast<Eigen::Index>(kStableDim), ErrorKind::InvalidConfig,
          "theta_S must have ", kStableDim, " entries, got ", theta_s.size());
  require(opt.target_noise_std >= 0.0, ErrorKind::InvalidConfig, "target noise std must be >= 0");
  const double scale = laplace_scale(r, opt.scale_rule);
  const double sign = r > 0 ? 1.0 : -1.0;

  std::normal_distribution<double> cov(0.0, std::sqrt(2.0));
  std::normal_distribution<double> eps(0.0, 1.0);
  std::exponential_distribution<double> expo(1.0);

  Dataset ds;
  ds.X.resize(static_cast<Eigen::Index>(n), kSimDim);
  ds.y.resize(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    for (std::size_t c = 0; c < kStableDim + kIrrelevantDim; ++c)
      ds.X(row, static_cast<Eigen::Index>(c)) = cov(rng);
    double y = 0.0;
    for (std::size_t c = 0; c < kStableDim; ++c)
      y += theta_s[static_cast<Eigen::Index>(c)] * ds.X(row, static_cast<Eigen::Index>(c));
    y += 0.1 * ds.X(row, 0) * ds.X(row, 1) * ds.X(row, 2);
    y += opt.target_noise_std * eps(rng);
    // Laplace(mu, b) = mu + b (E1 - E2) with E1, E2 ~ Exp(1).
    const double e1 = expo(rng);
    const double e2 = expo(rng);
    ds.X(row, kSimDim - 1) = sign * y + scale * (e1 - e2);
    ds.y[row] = y;
  }
  ds.group_id.assign(n, opt.group);
  ds.noise_flag.assign(n, 0);
  return ds;
}

inline std::size_t noise_count(double eps, std::size_t n) {
  return static_cast<std::size_t>(std::llround(eps * static_cast<double>(n)));
}

// Replaces round(eps n) labels (chosen uniformly without replacement) by draws
// from N(0, s^2), s = pre-noise sample std of y (or 1 when std_mode is off).
inline Dataset inject_label_noise(const Dataset& ds, double eps, Rng& rng, bool std_mode = true) {
  require(eps >= 0.0 && eps < 1.0, ErrorKind::InvalidConfig, "label noise level must be in [0,1), got ", eps);
  Dataset out = ds;
  const std::size_t k = noise_count(eps, ds.n());
  if (k == 0) return out;
  const double s = std_mode ? sample_std(ds.y) : 1.0;
  std::vector<std::size_t> all(ds.n());
  std::iota(all.begin(), all.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  chosen.reserve(k);
  std::sample(all.begin(), all.end(), std::back_inserter(chosen), static_cast<std::ptrdiff_t>(k), rng);
  std::normal_distribution<double> noise(0.0, s);
  for (std::size_t idx : chosen) {
    out.y[static_cast<Eigen::Index>(idx)] = noise(rng);
    out.noise_flag[idx] = 1;
  }
  return out;
}

struct SimConfig {
  std::size_t n_major = 9500;
  std::size_t n_minor = 500;
  double r_major = 1.9;
  double r_minor = -1.3;
  std::vector<double> test_rs{3.0, 2.3, -1.9, -2.7};
  std::size_t test_size = 1000;
  double noise_level = 0.05;
  Vector theta_s = default_theta_s();
  bool label_noise_std_mode = true;
  double target_noise_std = 0.5;
  LaplaceScaleRule scale_rule = LaplaceScaleRule::InverseLog;
  std::uint64_t seed = 0;

  void validate() const {
    require(n_major >= 1 && n_minor >= 1, ErrorKind::InvalidConfig, "n_major and n_minor must be >= 1");
    require(noise_level >= 0.0 && noise_level < 0.5, ErrorKind::InvalidConfig,
            "noise_level must be in [0, 0.5), got ", noise_level);
    laplace_scale(r_major);
    laplace_scale(r_minor);
    for (double r : test_rs) laplace_scale(r);
    require(test_size >= 1, ErrorKind::InvalidConfig, "test_size must be >= 1");
    require(theta_s.size() == static_cast<Eigen::Index>(kStableDim) && theta_s.allFinite(),
            ErrorKind::InvalidConfig, "theta_S must be a finite ", kStableDim, "-vector");
  }

  // theta* = (theta_S, 0, ..., 0): U and V carry no stable signal.
  Vector theta_star() const {
    Vector t = Vector::Zero(kSimDim);
    t.head(kStableDim) = theta_s;
    return t;
  }
};

struct TestSplit {
  double r = 0.0;
  Dataset data;
};

struct Benchmark {
  Dataset train;
  std::vector<TestSplit> tests;
};

// Streams: 0 major, 1 minor, 2 label noise, 3 + t for test split t.
// `stream_offset` shifts all ids so held-out copies use disjoint streams.
inline Benchmark make_benchmark(const SimConfig& cfg, std::uint64_t stream_offset = 0) {
  cfg.validate();
  GenOptions opt{cfg.target_noise_std, cfg.scale_rule, 0};
  Rng major_rng = make_rng(cfg.seed, stream_offset + 0);
  Rng minor_rng = make_rng(cfg.seed, stream_offset + 1);
  Rng noise_rng = make_rng(cfg.seed, stream_offset + 2);

  Benchmark b;
  Dataset major = gen_subpopulation(cfg.r_major, cfg.n_major, cfg.theta_s, major_rng, opt);
  opt.group = 1;
  Dataset minor = gen_subpopulation(cfg.r_minor, cfg.n_minor, cfg.theta_s, minor_rng, opt);
  b.train = inject_label_noise(concat(major, minor), cfg.noise_level, noise_rng, cfg.label_noise_std_mode);

  for (std::size_t t = 0; t < cfg.test_rs.size(); ++t) {
    Rng rng = make_rng(cfg.seed, stream_offset + 3 + t);
    GenOptions topt{cfg.target_noise_std, cfg.scale_rule, static_cast<int>(t)};
    b.tests.push_back({cfg.test_rs[t], gen_subpopulation(cfg.test_rs[t], cfg.test_size, cfg.theta_s, rng, topt)});
  }
  return b;
}

// ---------------------------------------------------------------------------
// CSV

struct GroupByColumn {
  std::string column;
};

struct GroupByBins {
  std::string column;
  std::vector<double> edges;
};

using GroupRule = std::variant<std::monostate, GroupByColumn, GroupByBins>;

struct RealDatasetSpec {
  std::string csv_path;
  std::string target_column;
  std::vector<std::string> feature_columns;
  GroupRule group_rule;
  bool standardize = false;
  // Rows whose group id is listed form the training subset used for the
  // z-score statistics; empty means all rows.
  std::vector<int> train_groups;

  void validate() const {
    require(!feature_columns.empty(), ErrorKind::InvalidConfig, "no feature columns selected");
    std::set<std::string> feats(feature_columns.begin(), feature_columns.end());
    require(feats.size() == feature_columns.size(), ErrorKind::InvalidConfig, "duplicate feature columns");
    require(!feats.contains(target_column), ErrorKind::InvalidConfig, "target column '", target_column,
            "' is also a feature column");
    if (const auto* bins = std::get_if<GroupByBins>(&group_rule)) {
      for (std::size_t i = 1; i < bins->edges.size(); ++i)
        require(bins->edges[i] > bins->edges[i - 1], ErrorKind::InvalidConfig, "bin edges must be strictly increasing");
    }
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

inline std::optional<double> parse_real(std::string_view s) {
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
  if (s.empty()) return std::nullopt;
  if (s.front() == '+') s.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

}  // namespace detail

inline int bin_index(double value, const std::vector<double>& edges) {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), value) - edges.begin());
}

inline Dataset load_csv(const RealDatasetSpec& spec) {
  spec.validate();
  std::ifstream in(spec.csv_path);
  require(in.good(), ErrorKind::Io, "cannot open CSV file '", spec.csv_path, "'");
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Parse, "'", spec.csv_path, "': missing header row");
  const auto header = detail::split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t c = 0; c < header.size(); ++c) col.emplace(header[c], c);
  auto find = [&](const std::string& name) {
    auto it = col.find(name);
    require(it != col.end(), ErrorKind::MissingColumn, "'", spec.csv_path, "': column '", name, "' not found");
    return it->second;
  };
  std::vector<std::size_t> feat_idx;
  for (const auto& f : spec.feature_columns) feat_idx.push_back(find(f));
  const std::size_t target_idx = find(spec.target_column);
  std::optional<std::size_t> group_idx;
  if (const auto* gc = std::get_if<GroupByColumn>(&spec.group_rule)) group_idx = find(gc->column);
  if (const auto* gb = std::get_if<GroupByBins>(&spec.group_rule)) group_idx = find(gb->column);

  std::vector<std::vector<double>> rows;
  std::vector<double> ys;
  std::vector<int> groups;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    auto cell = [&](std::size_t c, const std::string& name) {
      require(c < cells.size(), ErrorKind::Parse, "'", spec.csv_path, "' line ", line_no, ": missing cell for column '", name, "'");
      auto v = detail::parse_real(cells[c]);
      require(v.has_value(), ErrorKind::Parse, "'", spec.csv_path, "' line ", line_no, ": cannot parse '", cells[c],
              "' in column '", name, "' as a real");
      return *v;
    };
    std::vector<double> r;
    for (std::size_t f = 0; f < feat_idx.size(); ++f) r.push_back(cell(feat_idx[f], spec.feature_columns[f]));
    ys.push_back(cell(target_idx, spec.target_column));
    int g = 0;
    if (const auto* gc = std::get_if<GroupByColumn>(&spec.group_rule)) {
      const double gv = cell(*group_idx, gc->column);
      require(gv == std::floor(gv), ErrorKind::Parse, "'", spec.csv_path, "' line ", line_no, ": group value ", gv,
              " is not an integer");
      g = static_cast<int>(gv);
    } else if (const auto* gb = std::get_if<GroupByBins>(&spec.group_rule)) {
      g = bin_index(cell(*group_idx, gb->column), gb->edges);
    }
    groups.push_back(g);
    rows.push_back(std::move(r));
  }
  require(!rows.empty(), ErrorKind::EmptySelection, "'", spec.csv_path, "': no data rows");

  Dataset ds;
  const auto n = static_cast<Eigen::Index>(rows.size());
  const auto d = static_cast<Eigen::Index>(feat_idx.size());
  ds.X.resize(n, d);
  ds.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index c = 0; c < d; ++c) ds.X(i, c) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)];
    ds.y[i] = ys[static_cast<std::size_t>(i)];
  }
  ds.group_id = std::move(groups);
  ds.noise_flag.assign(rows.size(), 0);

  if (spec.standardize) {
    std::vector<Eigen::Index> train_rows;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int g = ds.group_id[static_cast<std::size_t>(i)];
      if (spec.train_groups.empty() ||
          std::find(spec.train_groups.begin(), spec.train_groups.end(), g) != spec.train_groups.end())
        train_rows.push_back(i);
    }
    require(train_rows.size() >= 2, ErrorKind::EmptySelection, "standardization needs >= 2 training rows, got ",
            train_rows.size());
    for (Eigen::Index c = 0; c < d; ++c) {
      double mean = 0.0;
      for (auto i : train_rows) mean += ds.X(i, c);
      mean /= static_cast<double>(train_rows.size());
      double var = 0.0;
      for (auto i : train_rows) var += (ds.X(i, c) - mean) * (ds.X(i, c) - mean);
      const double sd = std::sqrt(var / static_cast<double>(train_rows.size()));
      require(sd > 0.0, ErrorKind::Numerical, "feature '", spec.feature_columns[static_cast<std::size_t>(c)],
              "' is constant on the training subset");
      ds.X.col(c) = (ds.X.col(c).array() - mean) / sd;
    }
  }
  ds.validate();
  return ds;
}

inline std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write '", path, "'");
  for (std::size_t c = 0; c < ds.d(); ++c) out << "feature_" << c << ',';
  out << "y,group_id,noise_flag\n";
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    for (std::size_t c = 0; c < ds.d(); ++c) out << format_real(ds.X(row, static_cast<Eigen::Index>(c))) << ',';
    out << format_real(ds.y[row]) << ',' << ds.group_id[i] << ',' << int(ds.noise_flag[i]) << '\n';
  }
  require(out.good(), ErrorKind::Io, "write failed for '", path, "'");
}

}  // namespace gcdro
