#pragma once

// Inner maximizer: explicit-Euler gradient flow of the calibrated risk over
// the probability simplex on the graph, with upwind fluxes.
//
//   v_ij  = (l_i - l_j) + beta (log q_j - log q_i) + alpha (S_j - S_i)
//   xi_ij = v_ij * (v_ij > 0 ? q_j : q_i)
//   dq_i  = sum_{j in N(i)} w_ij xi_ij
//
// with S the interaction sums of risk.hpp. v is the difference of the risk
// gradient between the endpoints, so the continuous flow ascends R at rate
// 1/2 sum_E w xi v >= 0 and conserves mass (xi_ji = -xi_ij).

#include "gcdro/risk.hpp"

#include <functional>
#include <limits>
#include <vector>

namespace gcdro {

struct FlowConfig {
  std::size_t t_in = 500;
  double tau = 0.05;
  bool adaptive = true;
  double safety = 0.5;
  double alpha = 0.0;
  double beta = 1.0;
  // Backtrack (halve tau) until the Euler step achieves at least half of the
  // first-order risk increase.
  bool ascent_guard = true;

  void validate() const {
    require(t_in >= 1, ErrorKind::InvalidConfig, "t_in must be >= 1");
    require(tau > 0.0 && std::isfinite(tau), ErrorKind::InvalidConfig, "tau must be > 0, got ", tau);
    require(safety > 0.0 && safety < 1.0, ErrorKind::InvalidConfig, "safety must be in (0,1), got ", safety);
    require(alpha >= 0.0, ErrorKind::InvalidConfig, "alpha must be >= 0");
    require(beta >= 0.0, ErrorKind::InvalidConfig, "beta must be >= 0");
  }
};

struct FlowState {
  WeightVector q;
  std::size_t steps_done = 0;
  double time_elapsed = 0.0;
  double action = 0.0;
  double last_risk = 0.0;
  double last_tau = 0.0;        // tau_eff of the latest step (0 when it did not move)
  double velocity_norm = 0.0;   // max |v_ij| at the start of the latest step
};

struct FlowTraceRow {
  std::size_t step = 0;
  double tau_eff = 0.0;
  double risk = 0.0;
  double action = 0.0;
  double min_q = 0.0;
  double max_q = 0.0;
};

inline double upwind_flux(double q_i, double q_j, double v) { return v > 0.0 ? v * q_j : v * q_i; }

namespace detail {

inline constexpr double kLogFloor = 1e-300;

inline double safe_log(double x) { return std::log(std::max(x, kLogFloor)); }

}  // namespace detail

/// Per-directed-edge velocities; v_ij + v_ji == 0 exactly.
inline std::vector<double> velocities(const LossVector& ell, const WeightVector& q, const Graph& g, double alpha, double beta) {
  detail::check_sizes(ell, q.size(), g);
  q.require_interior();
  const Vector s = interaction_sums(ell, q.values(), g);
  std::vector<double> v(g.num_directed_edges());
  for (std::size_t e = 0; e < v.size(); ++e) {
    const auto& ed = g.edges()[e];
    const auto i = static_cast<Eigen::Index>(ed.src), j = static_cast<Eigen::Index>(ed.dst);
    v[e] = (ell[i] - ell[j]) + beta * (std::log(q[ed.dst]) - std::log(q[ed.src])) + alpha * (s[j] - s[i]);
  }
  return v;
}

/// Stateful integrator for fixed losses. Caches per-edge loss gaps, log q and
/// the interaction sums between steps.
class FlowIntegrator {
 public:
  FlowIntegrator(const LossVector& ell, const Graph& g, const FlowConfig& cfg) : ell_(ell), g_(g), cfg_(cfg) {
    cfg_.validate();
    require(static_cast<std::size_t>(ell.size()) == g.n(), ErrorKind::DimensionMismatch, "flow: losses ", ell.size(),
            " vs graph ", g.n());
    require(std::isfinite(ell.sum()), ErrorKind::Numerical, "flow: non-finite losses");
    gap2_.resize(g.num_directed_edges());
    for (std::size_t e = 0; e < gap2_.size(); ++e) {
      const auto& ed = g.edges()[e];
      const double diff = ell[static_cast<Eigen::Index>(ed.dst)] - ell[static_cast<Eigen::Index>(ed.src)];
      gap2_[e] = ed.weight * diff * diff;
    }
    v_.resize(g.num_directed_edges());
  }

  FlowState start(const WeightVector& q0) {
    require(q0.size() == g_.n(), ErrorKind::DimensionMismatch, "flow: q0 has ", q0.size(), " entries, graph ", g_.n());
    q0.require_interior();
    FlowState st;
    st.q = q0;
    load(q0.values());
    st.last_risk = risk_;
    return st;
  }

  double current_risk() const { return risk_; }

  // One explicit Euler step from the state last passed to start()/step().
  FlowState step(FlowState st) {
    const std::size_t n = g_.n();
    const Vector& q = st.q.values();
    const auto edges = g_.edges();
    const double alpha = cfg_.alpha, beta = cfg_.beta;

    double max_outflow = 0.0, vmax = 0.0, rate = 0.0, kinetic = 0.0;
    dq_.setZero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      double outflow = 0.0, acc = 0.0;
      for (std::size_t e = g_.offset(i); e < g_.offset(i + 1); ++e) {
        const auto j = static_cast<Eigen::Index>(edges[e].dst);
        const double v = (ell_[ii] - ell_[j]) + beta * (logq_[j] - logq_[ii]) + alpha * (s_[j] - s_[ii]);
        v_[e] = v;
        const double xi = upwind_flux(q[ii], q[j], v);
        acc += edges[e].weight * xi;
        if (v < 0.0) outflow += edges[e].weight * (-v);
        rate += edges[e].weight * xi * v;
        kinetic += xi * v;
        vmax = std::max(vmax, std::abs(v));
      }
      dq_[ii] = acc;
      max_outflow = std::max(max_outflow, outflow);
    }
    require(std::isfinite(rate) && std::isfinite(max_outflow), ErrorKind::Numerical,
            "flow: non-finite velocity at step ", st.steps_done);
    rate *= 0.5;
    kinetic *= 0.5;
    st.velocity_norm = vmax;
    ++st.steps_done;

    if (vmax == 0.0 || dq_.cwiseAbs().maxCoeff() == 0.0) {
      st.last_tau = 0.0;
      return st;
    }

    double tau = cfg_.tau;
    if (cfg_.adaptive && max_outflow > 0.0) tau = std::min(tau, cfg_.safety / max_outflow);
    if (tau_hint_ > 0.0) tau = std::min(tau, tau_hint_);

    const double r0 = risk_;
    for (int attempt = 0; attempt < 60; ++attempt, tau *= 0.5) {
      trial_ = q + tau * dq_;
      if (trial_.minCoeff() <= 0.0) {
        require(cfg_.adaptive || cfg_.ascent_guard, ErrorKind::Numerical, "flow: step ", st.steps_done,
                " left the simplex interior (tau ", tau, ")");
        continue;
      }
      const double r1 = evaluate(trial_);
      const double predicted = tau * rate;
      // Below roundoff the risk difference carries no signal; require instead
      // that the step does not pass the line maximum (slope along dq at the
      // trial point still nonnegative), which keeps Euler from oscillating.
      const bool negligible = predicted <= 1e-13 * (1.0 + std::abs(r0));
      const bool accept = negligible ? trial_slope() >= 0.0 : r1 - r0 >= 0.5 * predicted;
      if (!cfg_.ascent_guard || accept) {
        commit(trial_);
        risk_ = r1;
        // Grow by at most 2x per step, so a backtracked scale is remembered.
        tau_hint_ = 2.0 * tau;
        st.q = WeightVector::trusted(trial_);
        st.time_elapsed += tau;
        st.action += tau * kinetic;
        st.last_risk = r1;
        st.last_tau = tau;
        assert_mass(st);
        return st;
      }
    }
    // No acceptable step at any scale: stay put.
    st.last_tau = 0.0;
    return st;
  }

  const std::vector<double>& last_velocities() const { return v_; }

 private:
  void load(const Vector& q) {
    commit(q);
    risk_ = evaluate_cached(q);
  }

  void commit(const Vector& q) {
    if (&q == &trial_) {
      logq_.swap(trial_logq_);
      s_.swap(trial_s_);
    } else {
      logq_ = q.unaryExpr([](double x) { return detail::safe_log(x); });
      s_ = sums(q);
    }
  }

  Vector sums(const Vector& q) const {
    Vector s(static_cast<Eigen::Index>(g_.n()));
    const auto edges = g_.edges();
    for (std::size_t i = 0; i < g_.n(); ++i) {
      double acc = 0.0;
      for (std::size_t e = g_.offset(i); e < g_.offset(i + 1); ++e) acc += gap2_[e] * q[static_cast<Eigen::Index>(edges[e].dst)];
      s[static_cast<Eigen::Index>(i)] = acc;
    }
    return s;
  }

  double evaluate_cached(const Vector& q) const {
    return q.dot(ell_) - 0.5 * cfg_.alpha * q.dot(s_) - cfg_.beta * q.dot(logq_);
  }

  // Risk at a trial point; fills the trial caches.
  double evaluate(const Vector& q) {
    trial_logq_ = q.unaryExpr([](double x) { return detail::safe_log(x); });
    trial_s_ = cfg_.alpha == 0.0 ? Vector::Zero(q.size()) : sums(q);
    return q.dot(ell_) - 0.5 * cfg_.alpha * q.dot(trial_s_) - cfg_.beta * q.dot(trial_logq_);
  }

  // dR/dq at the trial point dotted with the step direction; the constant
  // part of the gradient cancels because dq sums to zero.
  double trial_slope() const {
    return dq_.dot(ell_ - cfg_.alpha * trial_s_ - cfg_.beta * trial_logq_);
  }

  static void assert_mass([[maybe_unused]] const FlowState& st) {
#ifndef NDEBUG
    require(std::abs(st.q.values().sum() - 1.0) <= 1e-10, ErrorKind::Numerical, "flow: mass drift ",
            st.q.values().sum() - 1.0);
#endif
  }

  const LossVector& ell_;
  const Graph& g_;
  FlowConfig cfg_;
  std::vector<double> gap2_;
  std::vector<double> v_;
  Vector logq_, s_, dq_, trial_, trial_logq_, trial_s_;
  double risk_ = 0.0;
  double tau_hint_ = 0.0;
};

/// Single transition. Stateless wrapper around FlowIntegrator.
inline FlowState step(const FlowState& st, const LossVector& ell, const Graph& g, const FlowConfig& cfg) {
  FlowIntegrator integ(ell, g, cfg);
  FlowState s = integ.start(st.q);
  s.steps_done = st.steps_done;
  s.time_elapsed = st.time_elapsed;
  s.action = st.action;
  return integ.step(s);
}

using FlowObserver = std::function<void(const FlowTraceRow&)>;

inline FlowState run_flow(const WeightVector& q0, const LossVector& ell, const Graph& g, const FlowConfig& cfg,
                          const FlowObserver& observe = {}) {
  FlowIntegrator integ(ell, g, cfg);
  FlowState st = integ.start(q0);
  for (std::size_t t = 0; t < cfg.t_in; ++t) {
    st = integ.step(std::move(st));
    if (observe)
      observe({st.steps_done, st.last_tau, st.last_risk, st.action, st.q.values().minCoeff(), st.q.values().maxCoeff()});
  }
  return st;
}

/// Runs until max |v_ij| < velocity_tol (or max_steps).
inline FlowState run_flow_to_stationarity(const WeightVector& q0, const LossVector& ell, const Graph& g, FlowConfig cfg,
                                          double velocity_tol, std::size_t max_steps) {
  cfg.t_in = std::max<std::size_t>(cfg.t_in, 1);
  FlowIntegrator integ(ell, g, cfg);
  FlowState st = integ.start(q0);
  for (std::size_t t = 0; t < max_steps; ++t) {
    st = integ.step(std::move(st));
    if (st.velocity_norm < velocity_tol) return st;
  }
  fail(ErrorKind::NonConvergence, "flow did not reach velocity norm ", velocity_tol, " within ", max_steps,
       " steps (last ", st.velocity_norm, ")");
}

inline Vector softmax(const Vector& z) {
  const double m = z.maxCoeff();
  Vector e = (z.array() - m).exp();
  return e / e.sum();
}

/// Self-consistency map of the stationary state:
///   T(q)_i = exp((l_i - alpha S_i(q)) / beta) / Z.
inline Vector stationary_map(const LossVector& ell, const Vector& q, const Graph& g, double alpha, double beta) {
  const Vector s = alpha == 0.0 ? Vector::Zero(ell.size()) : interaction_sums(ell, q, g);
  return softmax((ell - alpha * s) / beta);
}

struct FixedPointResult {
  WeightVector q;
  double residual = 0.0;
  std::size_t iterations = 0;
};

/// Damped fixed-point iteration q <- (1 - d) q + d T(q) from uniform; the
/// damping halves whenever the residual grows and recovers slowly otherwise.
inline FixedPointResult stationary_fixed_point(const LossVector& ell, const Graph& g, double alpha, double beta,
                                               double tol = 1e-12, std::size_t max_iter = 100000, double damping = 0.5) {
  require(beta > 0.0, ErrorKind::InvalidConfig, "stationary_fixed_point needs beta > 0");
  require(static_cast<std::size_t>(ell.size()) == g.n(), ErrorKind::DimensionMismatch, "fixed point: size mismatch");
  require(damping > 0.0 && damping <= 1.0, ErrorKind::InvalidConfig, "damping must be in (0,1]");
  Vector q = Vector::Constant(ell.size(), 1.0 / static_cast<double>(ell.size()));
  const double max_damping = damping;
  double prev = std::numeric_limits<double>::infinity();
  double residual = prev;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Vector t = stationary_map(ell, q, g, alpha, beta);
    residual = (t - q).cwiseAbs().maxCoeff();
    require(std::isfinite(residual), ErrorKind::Numerical, "fixed point: non-finite residual at iteration ", it);
    if (residual < tol) return {WeightVector(q, 1e-9), residual, it};
    if (residual > prev) damping = std::max(damping * 0.5, 1e-4);
    else damping = std::min(damping * 1.05, max_damping);
    prev = residual;
    q = (1.0 - damping) * q + damping * t;
    q /= q.sum();
  }
  fail(ErrorKind::NonConvergence, "fixed point did not converge in ", max_iter, " iterations (residual ", residual, ")");
}

}  // namespace gcdro
