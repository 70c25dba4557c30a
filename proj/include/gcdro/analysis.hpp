#pragma once

// Evaluation metrics and worst-case weight diagnostics.

#include "gcdro/dro.hpp"

#include <map>
#include <string>
#include <vector>

namespace gcdro {

// ---------------------------------------------------------------------------
// Group mass

/// Worst-case mass per group. Noisy samples are pooled into their own bucket
/// and excluded from their group, so group masses plus noise mass sum to 1.
struct GroupWeightSummary {
  std::map<int, double> group;
  double noise = 0.0;

  double total() const {
    double t = noise;
    for (const auto& [id, m] : group) t += m;
    return t;
  }
  double mass(int id) const {
    const auto it = group.find(id);
    return it == group.end() ? 0.0 : it->second;
  }
};

inline GroupWeightSummary group_mass(const Vector& q, const Dataset& ds) {
  require(static_cast<std::size_t>(q.size()) == ds.n(), ErrorKind::DimensionMismatch, "group_mass: ", q.size(),
          " weights for ", ds.n(), " samples");
  GroupWeightSummary s;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const double w = q[static_cast<Eigen::Index>(i)];
    if (ds.noise_flag[i]) s.noise += w;
    else s.group[ds.group_id[i]] += w;
  }
  return s;
}

inline GroupWeightSummary group_mass(const WeightVector& q, const Dataset& ds) { return group_mass(q.values(), ds); }

// ---------------------------------------------------------------------------
// Regression metrics

struct RegressionMetrics {
  std::vector<double> r;     // test-split shift parameters, in order
  std::vector<double> rmse;  // one per split
  double mean = 0.0;
  double std = 0.0;          // population convention (divide by m)
};

inline double rmse(const ModelParams& m, const Dataset& ds) {
  require(ds.n() > 0, ErrorKind::EmptySelection, "rmse on an empty dataset");
  return std::sqrt(per_sample_loss(m, ds).mean());
}

inline RegressionMetrics regression_metrics(const ModelParams& m, const std::vector<TestSplit>& tests) {
  require(!tests.empty(), ErrorKind::EmptySelection, "regression_metrics needs at least one test split");
  RegressionMetrics out;
  for (const auto& t : tests) {
    out.r.push_back(t.r);
    out.rmse.push_back(rmse(m, t.data));
  }
  const double k = static_cast<double>(out.rmse.size());
  for (double v : out.rmse) out.mean += v / k;
  for (double v : out.rmse) out.std += (v - out.mean) * (v - out.mean) / k;
  out.std = std::sqrt(out.std);
  return out;
}

inline double param_error(const Vector& theta_hat, const Vector& theta_star) {
  require(theta_hat.size() == theta_star.size(), ErrorKind::DimensionMismatch, "param_error: dims ", theta_hat.size(),
          " vs ", theta_star.size());
  return (theta_hat - theta_star).norm();
}

inline double param_error(const ModelParams& m, const Vector& theta_star) {
  const auto* lin = std::get_if<LinearModel>(&m);
  require(lin != nullptr, ErrorKind::InvalidConfig, "parameter error is defined for linear models only");
  return param_error(lin->theta, theta_star);
}

// ---------------------------------------------------------------------------
// Sample-weight sensitivity

struct SensitivityReport {
  std::string method;
  std::size_t i = 0;
  std::size_t j = 0;
  double delta = 0.0;
  double gamma = 1.0;        // q_i / q_j on the clean losses
  double gamma_noisy = 1.0;  // q_i / q_j after raising l_i by delta
  double xi = 0.0;           // log gamma_noisy - log gamma
  bool assumption_satisfied = false;
  double neighbour_mean_loss = 0.0;  // q-weighted mean loss over N(i)
};

/// Worst-case weights at fixed losses in final-state semantics: the
/// stationary point for GDRO/GCDRO, the dual solution for KL/chi2, ERM
/// uniform. DORO is not supported (its weights vanish on dropped samples).
inline Vector worst_case_at_fixed_losses(const MethodSpec& method, const LossVector& ell, const Graph* g) {
  validate(method);
  return std::visit([&](const auto& m) -> Vector {
    using M = std::decay_t<decltype(m)>;
    if constexpr (std::is_same_v<M, Erm>) {
      return Vector::Constant(ell.size(), 1.0 / static_cast<double>(ell.size()));
    } else if constexpr (std::is_same_v<M, KlDro>) {
      return kl_worst_case(ell, m.rho).q;
    } else if constexpr (std::is_same_v<M, Chi2Dro>) {
      return chi2_worst_case(ell, m.rho).q;
    } else if constexpr (std::is_same_v<M, Doro>) {
      fail(ErrorKind::InvalidConfig, "sensitivity is undefined for DORO");
    } else {
      require(g != nullptr, ErrorKind::InvalidConfig, method_name(method), " sensitivity needs a graph");
      double alpha = 0.0;
      if constexpr (std::is_same_v<M, Gcdro>) alpha = m.alpha;
      return stationary_fixed_point(ell, *g, alpha, m.beta).q.values();
    }
  }, method);
}

/// Index of the sample with the median loss (lower median, ties by index).
inline std::size_t median_loss_index(const LossVector& ell, std::size_t exclude) {
  std::vector<std::size_t> idx;
  for (std::size_t k = 0; k < static_cast<std::size_t>(ell.size()); ++k)
    if (k != exclude) idx.push_back(k);
  require(!idx.empty(), ErrorKind::InvalidConfig, "need at least two samples");
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return ell[static_cast<Eigen::Index>(a)] < ell[static_cast<Eigen::Index>(b)];
  });
  return idx[(idx.size() - 1) / 2];
}

/// Loss-level sensitivity: raise l_i by delta and compare q_i/q_j before and
/// after. `j` defaults to the median-loss sample other than i.
inline SensitivityReport sensitivity(const LossVector& ell, std::size_t i, double delta, const MethodSpec& method,
                                     const Graph* g, std::optional<std::size_t> j = std::nullopt) {
  const auto n = static_cast<std::size_t>(ell.size());
  require(i < n, ErrorKind::InvalidConfig, "sample index ", i, " out of range");
  require(delta >= 0.0 && std::isfinite(delta), ErrorKind::InvalidConfig, "delta must be finite and >= 0");
  SensitivityReport rep;
  rep.method = method_name(method);
  rep.i = i;
  rep.j = j.value_or(median_loss_index(ell, i));
  rep.delta = delta;
  require(rep.j < n && rep.j != i, ErrorKind::InvalidConfig, "reference index must differ from i");

  const Vector q = worst_case_at_fixed_losses(method, ell, g);
  LossVector noisy = ell;
  noisy[static_cast<Eigen::Index>(i)] += delta;
  const Vector qn = worst_case_at_fixed_losses(method, noisy, g);

  const auto I = static_cast<Eigen::Index>(i), J = static_cast<Eigen::Index>(rep.j);
  require(q[I] > 0.0 && q[J] > 0.0 && qn[I] > 0.0 && qn[J] > 0.0, ErrorKind::Numerical,
          "sensitivity: zero weight on i or j");
  rep.gamma = q[I] / q[J];
  rep.gamma_noisy = qn[I] / qn[J];
  rep.xi = std::log(qn[I]) - std::log(qn[J]) - (std::log(q[I]) - std::log(q[J]));

  if (g != nullptr) {
    require(g->n() == n, ErrorKind::DimensionMismatch, "sensitivity: graph size mismatch");
    require(g->degree(i) > 0, ErrorKind::InvalidConfig, "sample ", i, " is isolated in the graph");
    double num = 0.0, den = 0.0;
    for (const auto& e : g->neighbors(i)) {
      const double w = q[static_cast<Eigen::Index>(e.dst)] * e.weight;
      num += w * ell[static_cast<Eigen::Index>(e.dst)];
      den += w;
    }
    require(den > 0.0, ErrorKind::Numerical, "sample ", i, " has zero neighbour mass");
    rep.neighbour_mean_loss = num / den;
    rep.assumption_satisfied = delta >= 2.0 * (rep.neighbour_mean_loss - ell[I]);
  }
  return rep;
}

/// Dataset-level wrapper: perturbs y_i so that sample i's squared error under
/// `model` grows by exactly delta, keeping the residual's sign.
inline SensitivityReport sensitivity(const Dataset& ds, const ModelParams& model, std::size_t i, double delta,
                                     const MethodSpec& method, const Graph* g,
                                     std::optional<std::size_t> j = std::nullopt) {
  require(i < ds.n(), ErrorKind::InvalidConfig, "sample index ", i, " out of range");
  return sensitivity(per_sample_loss(model, ds), i, delta, method, g, j);
}

inline Dataset perturb_label(const Dataset& ds, const ModelParams& model, std::size_t i, double delta) {
  require(i < ds.n() && delta >= 0.0, ErrorKind::InvalidConfig, "perturb_label: bad index or delta");
  Dataset out = ds;
  const double pred = predict(model, ds.X.row(static_cast<Eigen::Index>(i)))[0];
  const double r = ds.y[static_cast<Eigen::Index>(i)] - pred;
  const double sign = r < 0.0 ? -1.0 : 1.0;
  out.y[static_cast<Eigen::Index>(i)] = pred + sign * std::sqrt(r * r + delta);
  return out;
}

}  // namespace gcdro
