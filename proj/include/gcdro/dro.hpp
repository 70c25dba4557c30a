#pragma once

// Trainers: ERM, KL-DRO and chi2-DRO through their dual worst-case solvers,
// DORO, GDRO and GCDRO through the graph gradient flow, plus an exhaustive
// simplex-grid worst-case oracle for tests.

#include "gcdro/flow.hpp"
#include "gcdro/models.hpp"

#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace gcdro {

// ---------------------------------------------------------------------------
// Method specifications

enum class ThetaGrad { FullRisk, WeightedOnly };

struct Erm {};
struct KlDro {
  double rho = 0.1;
};
struct Chi2Dro {
  double rho = 0.1;
};
struct Gdro {
  double beta = 1.0;
  std::size_t t_in = 500;
  double tau = 0.05;
};
struct Gcdro {
  double alpha = 1.0;
  double beta = 1.0;
  std::size_t t_in = 500;
  double tau = 0.05;
  ThetaGrad theta_grad = ThetaGrad::FullRisk;
};
struct Doro {
  double drop_frac = 0.05;
  std::variant<Chi2Dro, KlDro> inner = Chi2Dro{};
};

using MethodSpec = std::variant<Erm, KlDro, Chi2Dro, Gdro, Gcdro, Doro>;

inline std::string method_name(const MethodSpec& m) {
  struct V {
    std::string operator()(const Erm&) const { return "ERM"; }
    std::string operator()(const KlDro&) const { return "KL-DRO"; }
    std::string operator()(const Chi2Dro&) const { return "chi2-DRO"; }
    std::string operator()(const Gdro&) const { return "GDRO"; }
    std::string operator()(const Gcdro&) const { return "GCDRO"; }
    std::string operator()(const Doro&) const { return "DORO"; }
  };
  return std::visit(V{}, m);
}

inline bool needs_graph(const MethodSpec& m) {
  return std::holds_alternative<Gdro>(m) || std::holds_alternative<Gcdro>(m);
}

inline void validate(const MethodSpec& m) {
  struct V {
    void operator()(const Erm&) const {}
    void operator()(const KlDro& s) const {
      require(s.rho > 0.0, ErrorKind::InvalidConfig, "KL-DRO rho must be > 0, got ", s.rho);
    }
    void operator()(const Chi2Dro& s) const {
      require(s.rho > 0.0, ErrorKind::InvalidConfig, "chi2-DRO rho must be > 0, got ", s.rho);
    }
    void operator()(const Gdro& s) const {
      require(s.beta > 0.0 && s.t_in >= 1 && s.tau > 0.0, ErrorKind::InvalidConfig, "GDRO needs beta > 0, t_in >= 1, tau > 0");
    }
    void operator()(const Gcdro& s) const {
      require(s.alpha >= 0.0 && s.beta > 0.0 && s.t_in >= 1 && s.tau > 0.0, ErrorKind::InvalidConfig,
              "GCDRO needs alpha >= 0, beta > 0, t_in >= 1, tau > 0");
    }
    void operator()(const Doro& s) const {
      require(s.drop_frac >= 0.0 && s.drop_frac < 0.5, ErrorKind::InvalidConfig, "DORO drop_frac must be in [0,0.5)");
      std::visit(*this, s.inner);
    }
  };
  std::visit(V{}, m);
}

// ---------------------------------------------------------------------------
// Dual worst-case solvers

struct DualSolution {
  Vector q;                      // may touch the simplex boundary
  double lambda = 0.0;
  double eta = 0.0;              // chi2 only
  double objective = 0.0;        // dual value; equals sum q l at the optimum
  double constraint_residual = 0.0;
  bool vertex_limit = false;     // radius exceeds the largest attainable divergence
  bool constraint_slack = false; // constant losses: supremum attained at uniform
};

inline double kl_to_uniform(const Vector& q) {
  const double n = static_cast<double>(q.size());
  double kl = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i)
    if (q[i] > 0.0) kl += q[i] * std::log(n * q[i]);
  return kl;
}

inline double chi2_to_uniform(const Vector& q) {
  const double n = static_cast<double>(q.size());
  return (n * q.array() - 1.0).square().sum() / n;
}

namespace detail {

inline void check_losses(const LossVector& ell) {
  require(ell.size() > 0, ErrorKind::InvalidConfig, "empty loss vector");
  require(ell.allFinite(), ErrorKind::Numerical, "non-finite losses");
}

inline Vector uniform_over_max(const LossVector& ell) {
  const double m = ell.maxCoeff();
  Vector q = (ell.array() == m).cast<double>();
  return q / q.sum();
}

inline double log_sum_exp(const Vector& z) {
  const double m = z.maxCoeff();
  return m + std::log((z.array() - m).exp().sum());
}

// Bisection on log(lambda) for a divergence that decreases in lambda.
template <typename Divergence>
double solve_lambda(Divergence&& div, double rho, double lo = 1e-6, double hi = 1e6) {
  while (div(lo) < rho && lo > 1e-300) lo *= 1e-3;
  while (div(hi) > rho && hi < 1e300) hi *= 1e3;
  double a = std::log(lo), b = std::log(hi);
  for (int it = 0; it < 200 && b - a > 1e-14; ++it) {
    const double mid = 0.5 * (a + b);
    if (div(std::exp(mid)) > rho) a = mid; else b = mid;
  }
  return std::exp(0.5 * (a + b));
}

}  // namespace detail

/// sup_q sum q l  s.t.  KL(q || uniform) <= rho.  q_i ~ exp(l_i / lambda).
inline DualSolution kl_worst_case(const LossVector& ell, double rho) {
  detail::check_losses(ell);
  require(rho >= 0.0, ErrorKind::InvalidConfig, "KL radius must be >= 0, got ", rho);
  const auto n = ell.size();
  DualSolution sol;
  const bool constant = ell.maxCoeff() == ell.minCoeff();
  if (rho == 0.0 || constant) {
    sol.q = Vector::Constant(n, 1.0 / static_cast<double>(n));
    sol.objective = sol.q.dot(ell);
    sol.lambda = std::numeric_limits<double>::infinity();
    sol.constraint_residual = rho;
    sol.constraint_slack = constant && rho > 0.0;
    if (rho == 0.0) sol.constraint_residual = 0.0;
    return sol;
  }
  const Vector vertex = detail::uniform_over_max(ell);
  if (kl_to_uniform(vertex) <= rho) {
    sol.q = vertex;
    sol.lambda = 0.0;
    sol.objective = ell.maxCoeff();
    sol.constraint_residual = rho - kl_to_uniform(vertex);
    sol.vertex_limit = true;
    return sol;
  }
  auto q_of = [&](double lambda) { return softmax(ell / lambda); };
  const double lambda = detail::solve_lambda([&](double l) { return kl_to_uniform(q_of(l)); }, rho);
  sol.q = q_of(lambda);
  sol.lambda = lambda;
  // Dual value lambda log((1/n) sum exp(l/lambda)) + lambda rho.
  sol.objective = lambda * (detail::log_sum_exp(ell / lambda) - std::log(static_cast<double>(n))) + lambda * rho;
  sol.constraint_residual = std::abs(kl_to_uniform(sol.q) - rho);
  return sol;
}

/// sup_q sum q l  s.t.  (1/n) sum (n q_i - 1)^2 <= rho.
/// q_i = (l_i + lambda - eta)_+ / (lambda n).
inline DualSolution chi2_worst_case(const LossVector& ell, double rho) {
  detail::check_losses(ell);
  require(rho >= 0.0, ErrorKind::InvalidConfig, "chi2 radius must be >= 0, got ", rho);
  const auto n = ell.size();
  const double nd = static_cast<double>(n);
  DualSolution sol;
  const bool constant = ell.maxCoeff() == ell.minCoeff();
  if (rho == 0.0 || constant) {
    sol.q = Vector::Constant(n, 1.0 / nd);
    sol.objective = sol.q.dot(ell);
    sol.lambda = std::numeric_limits<double>::infinity();
    sol.constraint_residual = constant ? rho : 0.0;
    sol.constraint_slack = constant && rho > 0.0;
    return sol;
  }
  const Vector vertex = detail::uniform_over_max(ell);
  if (chi2_to_uniform(vertex) <= rho) {
    sol.q = vertex;
    sol.objective = ell.maxCoeff();
    sol.constraint_residual = rho - chi2_to_uniform(vertex);
    sol.vertex_limit = true;
    return sol;
  }
  std::vector<double> sorted(ell.data(), ell.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  // Threshold c with sum (l_i - c)_+ = lambda n, solved exactly on the sorted losses.
  auto threshold = [&](double lambda) {
    const double target = lambda * nd;
    double prefix = 0.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
      prefix += sorted[k];
      const double c = (prefix - target) / static_cast<double>(k + 1);
      const double next = k + 1 < sorted.size() ? sorted[k + 1] : -std::numeric_limits<double>::infinity();
      if (c >= next) return c;
    }
    return (prefix - target) / nd;
  };
  auto q_of = [&](double lambda) {
    const double c = threshold(lambda);
    return Vector(((ell.array() - c).max(0.0) / (lambda * nd)).matrix());
  };
  const double lambda = detail::solve_lambda([&](double l) { return chi2_to_uniform(q_of(l)); }, rho);
  const double c = threshold(lambda);
  sol.q = q_of(lambda);
  sol.q /= sol.q.sum();
  sol.lambda = lambda;
  sol.eta = c + lambda;
  // Lagrangian value sum q l - (lambda/2)(chi2(q) - rho), the penalty
  // multiplier being lambda/2 in this parameterization.
  sol.objective = sol.q.dot(ell) - 0.5 * lambda * (chi2_to_uniform(sol.q) - rho);
  sol.constraint_residual = std::abs(chi2_to_uniform(sol.q) - rho);
  return sol;
}

/// Indices (ascending) of the ceil((1 - drop_frac) n) smallest losses, ties by index.
inline std::vector<std::size_t> doro_filter(const LossVector& ell, double drop_frac) {
  require(drop_frac >= 0.0 && drop_frac < 0.5, ErrorKind::InvalidConfig, "drop_frac must be in [0, 0.5), got ", drop_frac);
  const auto n = static_cast<std::size_t>(ell.size());
  const auto keep = std::min<std::size_t>(n, static_cast<std::size_t>(std::ceil((1.0 - drop_frac) * static_cast<double>(n) - 1e-9)));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return ell[static_cast<Eigen::Index>(a)] < ell[static_cast<Eigen::Index>(b)];
  });
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// ---------------------------------------------------------------------------
// Exhaustive simplex-grid oracle

enum class Constraint { None, Kl, Chi2 };

struct BruteForceProblem {
  Constraint constraint = Constraint::None;
  double radius = 0.0;
  // When set, maximize the calibrated risk R instead of sum q l.
  const Graph* graph = nullptr;
  RiskConfig risk{};
};

struct BruteForceResult {
  Vector q;
  double objective = -std::numeric_limits<double>::infinity();
};

namespace detail {

inline double brute_objective(const LossVector& ell, const Vector& q, const BruteForceProblem& p) {
  if (p.graph == nullptr) return q.dot(ell);
  double tv = 0.0;
  for (const auto& e : p.graph->edges()) {
    const double d = ell[static_cast<Eigen::Index>(e.src)] - ell[static_cast<Eigen::Index>(e.dst)];
    tv += e.weight * q[static_cast<Eigen::Index>(e.src)] * q[static_cast<Eigen::Index>(e.dst)] * d * d;
  }
  return q.dot(ell) - 0.5 * p.risk.alpha * tv + p.risk.beta * entropy_boundary(q);
}

inline bool brute_feasible(const Vector& q, const BruteForceProblem& p) {
  switch (p.constraint) {
    case Constraint::None: return true;
    // Slack so the exact uniform point survives roundoff at radius 0.
    case Constraint::Kl: return kl_to_uniform(q) <= p.radius + 1e-14;
    case Constraint::Chi2: return chi2_to_uniform(q) <= p.radius + 1e-14;
  }
  return false;
}

inline double binom(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

// Visits q = center + h * (c_1, ..., c_{n-1}, -sum c) with |c_k| <= radius.
template <typename Visit>
void visit_box(const Vector& center, double h, int radius, Visit&& visit) {
  const auto n = center.size();
  std::vector<int> c(static_cast<std::size_t>(n - 1), -radius);
  Vector q(n);
  while (true) {
    int sum = 0;
    for (Eigen::Index k = 0; k + 1 < n; ++k) {
      q[k] = center[k] + h * c[static_cast<std::size_t>(k)];
      sum += c[static_cast<std::size_t>(k)];
    }
    q[n - 1] = center[n - 1] - h * sum;
    if (q.minCoeff() >= -1e-15) visit(q.cwiseMax(0.0));
    std::size_t k = 0;
    while (k < c.size() && ++c[k] > radius) c[k++] = -radius;
    if (k == c.size()) break;
  }
}

}  // namespace detail

/// Grid maximizer over the simplex for n <= 6. Enumerates the full lattice at
/// the coarsest resolution whose size stays below ~2e6, then zooms on the best
/// point with halving spacing until `grid_resolution` is reached.
inline BruteForceResult brute_force_worst_case(const LossVector& ell, const BruteForceProblem& p, double grid_resolution) {
  const auto n = static_cast<std::size_t>(ell.size());
  require(n >= 1 && n <= 6, ErrorKind::InvalidConfig, "brute force oracle supports n <= 6, got ", n);
  require(grid_resolution > 0.0 && grid_resolution <= 1.0, ErrorKind::InvalidConfig, "grid resolution must be in (0,1]");
  if (p.graph) require(p.graph->n() == n, ErrorKind::DimensionMismatch, "oracle graph size mismatch");
  BruteForceResult best;
  auto consider = [&](const Vector& q) {
    if (!detail::brute_feasible(q, p)) return;
    const double obj = detail::brute_objective(ell, q, p);
    if (obj > best.objective) {
      best.objective = obj;
      best.q = q;
    }
  };
  if (n == 1) {
    consider(Vector::Ones(1));
    return best;
  }
  std::size_t M = static_cast<std::size_t>(std::llround(1.0 / grid_resolution));
  while (detail::binom(M + n - 1, n - 1) > 2e6) M /= 2;
  M = std::max<std::size_t>(M, 2);
  // Full lattice {c / M : sum c = M}.
  std::vector<std::size_t> c(n, 0);
  Vector q(static_cast<Eigen::Index>(n));
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t k, std::size_t left) {
    if (k + 1 == n) {
      c[k] = left;
      for (std::size_t t = 0; t < n; ++t) q[static_cast<Eigen::Index>(t)] = static_cast<double>(c[t]) / static_cast<double>(M);
      consider(q);
      return;
    }
    for (std::size_t v = 0; v <= left; ++v) {
      c[k] = v;
      rec(k + 1, left - v);
    }
  };
  rec(0, M);
  require(best.q.size() > 0, ErrorKind::InvalidConfig, "oracle found no feasible grid point");
  double h = 1.0 / static_cast<double>(M);
  while (h > grid_resolution * (1.0 + 1e-9)) {
    h = std::max(h * 0.5, grid_resolution);
    // Re-centre until the best point stops moving. Near a curved constraint
    // boundary this can take many passes, so the cap is generous.
    for (int pass = 0; pass < 100000; ++pass) {
      const Vector center = best.q;
      detail::visit_box(center, h, 4, consider);
      if ((best.q - center).cwiseAbs().maxCoeff() == 0.0) break;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 5000;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool warm_start = false;
  std::size_t record_every = 100;

  void validate() const {
    require(epochs >= 1, ErrorKind::InvalidConfig, "epochs must be >= 1");
    require(lr > 0.0, ErrorKind::InvalidConfig, "lr must be > 0");
  }
};

struct TraceRecord {
  std::size_t epoch = 0;
  double risk = 0.0;
  double weighted_loss = 0.0;
  double tv = 0.0;
  double entropy = 0.0;
  double action = 0.0;
  double grad_norm = 0.0;
};

struct TrainedModel {
  ModelParams params;
  Vector final_q;       // worst-case weights at the last epoch (uniform for ERM)
  LossVector final_losses;  // losses the last q was computed from
  std::vector<TraceRecord> trace;
  std::vector<FlowTraceRow> final_flow;  // inner flow of the last epoch (graph methods)
};

namespace detail {

struct InnerResult {
  Vector q;
  double action = 0.0;
};

inline Vector dual_weights(const std::variant<Chi2Dro, KlDro>& inner, const LossVector& ell) {
  if (const auto* kl = std::get_if<KlDro>(&inner)) return kl_worst_case(ell, kl->rho).q;
  return chi2_worst_case(ell, std::get<Chi2Dro>(inner).rho).q;
}

}  // namespace detail

/// Full-batch alternating minimax: per epoch compute losses, obtain the
/// worst-case weights q, then take one Adam step on the theta-gradient.
inline TrainedModel train(const MethodSpec& method, const ModelParams& model0, const Dataset& ds, const Graph* g,
                          const TrainConfig& tc) {
  validate(method);
  tc.validate();
  ds.validate();
  if (needs_graph(method))
    require(g != nullptr && g->n() == ds.n(), ErrorKind::InvalidConfig, method_name(method),
            " needs a graph over the ", ds.n(), " training samples");

  const auto n = static_cast<Eigen::Index>(ds.n());
  const Vector uniform = Vector::Constant(n, 1.0 / static_cast<double>(n));
  TrainedModel out;
  out.params = model0;
  AdamState adam = AdamState::for_model(model0, tc.lr);
  Vector warm = uniform;

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const LossVector ell = per_sample_loss(out.params, ds);
    require(ell.allFinite(), ErrorKind::Numerical, "non-finite loss at epoch ", epoch);

    Vector q;
    double alpha = 0.0;
    bool include_tv = false;
    double action = 0.0;
    std::visit([&](const auto& m) {
      using M = std::decay_t<decltype(m)>;
      if constexpr (std::is_same_v<M, Erm>) {
        q = uniform;
      } else if constexpr (std::is_same_v<M, KlDro>) {
        q = kl_worst_case(ell, m.rho).q;
      } else if constexpr (std::is_same_v<M, Chi2Dro>) {
        q = chi2_worst_case(ell, m.rho).q;
      } else if constexpr (std::is_same_v<M, Doro>) {
        const auto keep = doro_filter(ell, m.drop_frac);
        LossVector kept(static_cast<Eigen::Index>(keep.size()));
        for (std::size_t t = 0; t < keep.size(); ++t) kept[static_cast<Eigen::Index>(t)] = ell[static_cast<Eigen::Index>(keep[t])];
        const Vector qk = detail::dual_weights(m.inner, kept);
        q = Vector::Zero(n);
        for (std::size_t t = 0; t < keep.size(); ++t) q[static_cast<Eigen::Index>(keep[t])] = qk[static_cast<Eigen::Index>(t)];
      } else {
        FlowConfig fc;
        fc.t_in = m.t_in;
        fc.tau = m.tau;
        fc.beta = m.beta;
        if constexpr (std::is_same_v<M, Gcdro>) {
          fc.alpha = m.alpha;
          alpha = m.alpha;
          include_tv = m.theta_grad == ThetaGrad::FullRisk;
        }
        FlowObserver obs;
        if (epoch + 1 == tc.epochs) obs = [&](const FlowTraceRow& row) { out.final_flow.push_back(row); };
        const FlowState st = run_flow(WeightVector::trusted(tc.warm_start ? warm : uniform), ell, *g, fc, obs);
        q = st.q.values();
        action = st.action;
        if (tc.warm_start) warm = q;
      }
    }, method);

    const Vector coef = risk_loss_coefficients(ell, q, g, alpha, include_tv);
    const ModelParams grad = loss_combination_grad(out.params, ds.X, ds.y, coef);

    if (tc.record_every > 0 && (epoch % tc.record_every == 0 || epoch + 1 == tc.epochs)) {
      TraceRecord r;
      r.epoch = epoch;
      r.weighted_loss = q.dot(ell);
      if (g != nullptr) r.tv = total_variation(ell, WeightVector::trusted(q), *g);
      r.entropy = entropy_boundary(q);
      double beta = 0.0;
      if (const auto* gd = std::get_if<Gdro>(&method)) beta = gd->beta;
      if (const auto* gc = std::get_if<Gcdro>(&method)) beta = gc->beta;
      r.risk = r.weighted_loss - 0.5 * alpha * r.tv + beta * r.entropy;
      r.action = action;
      r.grad_norm = flatten(grad).norm();
      out.trace.push_back(r);
    }

    auto [next, st] = adam_step(out.params, grad, std::move(adam));
    out.params = std::move(next);
    adam = std::move(st);
    if (epoch + 1 == tc.epochs) {
      out.final_q = q;
      out.final_losses = ell;
    }
  }
  return out;
}

}  // namespace gcdro
