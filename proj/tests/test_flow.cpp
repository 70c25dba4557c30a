#include "gcdro/flow.hpp"

#include <gtest/gtest.h>

using namespace gcdro;

namespace {

Graph random_connected(std::size_t n, Rng& rng, double chord_prob = 0.3) {
  std::uniform_real_distribution<double> U(0.2, 1.5), P(0.0, 1.0);
  std::vector<Edge> und;
  for (std::size_t i = 0; i + 1 < n; ++i) und.push_back({i, i + 1, U(rng)});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 2; j < n; ++j)
      if (P(rng) < chord_prob) und.push_back({i, j, U(rng)});
  return Graph::from_undirected(n, und);
}

Vector random_losses(std::size_t n, Rng& rng, double hi = 2.0) {
  std::uniform_real_distribution<double> L(0.0, hi);
  Vector ell(static_cast<Eigen::Index>(n));
  for (auto& v : ell) v = L(rng);
  return ell;
}

WeightVector random_weights(std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> U(0.2, 1.0);
  Vector q(static_cast<Eigen::Index>(n));
  for (auto& v : q) v = U(rng);
  return WeightVector(q / q.sum());
}

Matrix dense_weights(const Graph& g) {
  Matrix W = Matrix::Zero(static_cast<Eigen::Index>(g.n()), static_cast<Eigen::Index>(g.n()));
  for (const auto& e : g.edges()) W(static_cast<Eigen::Index>(e.src), static_cast<Eigen::Index>(e.dst)) = e.weight;
  return W;
}

}  // namespace

TEST(UpwindFlux, Examples) {
  EXPECT_EQ(upwind_flux(0.3, 0.7, 0.0), 0.0);
  EXPECT_NEAR(upwind_flux(0.3, 0.7, 2.0), 1.4, 1e-15);
  EXPECT_NEAR(upwind_flux(0.3, 0.7, -2.0), -0.6, 1e-15);
}

TEST(Velocities, EqualLossesUniformWeightsAreZero) {
  Rng rng = make_rng(1);
  const Graph g = random_connected(6, rng);
  const auto v = velocities(Vector::Constant(6, 0.4), WeightVector::uniform(6), g, 3.0, 0.7);
  for (double x : v) EXPECT_EQ(x, 0.0);
}

TEST(Velocities, AlphaBetaZeroIsLossGap) {
  Rng rng = make_rng(2);
  const Graph g = random_connected(6, rng);
  const Vector ell = random_losses(6, rng);
  const auto v = velocities(ell, random_weights(6, rng), g, 0.0, 0.0);
  for (std::size_t e = 0; e < v.size(); ++e) {
    const auto& ed = g.edges()[e];
    EXPECT_EQ(v[e], ell[static_cast<Eigen::Index>(ed.src)] - ell[static_cast<Eigen::Index>(ed.dst)]);
  }
}

TEST(Velocities, MatchesNaiveTranscriptionAndAntisymmetric) {
  Rng rng = make_rng(3);
  const std::size_t n = 5;
  const Graph g = random_connected(n, rng, 0.6);
  const Vector ell = random_losses(n, rng);
  const WeightVector q = random_weights(n, rng);
  const double alpha = 1.3, beta = 0.6;
  const Matrix W = dense_weights(g);
  const auto v = velocities(ell, q, g, alpha, beta);
  for (std::size_t e = 0; e < v.size(); ++e) {
    const auto i = static_cast<Eigen::Index>(g.edges()[e].src), j = static_cast<Eigen::Index>(g.edges()[e].dst);
    double si = 0.0, sj = 0.0;
    for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(n); ++h) {
      si += W(i, h) * std::pow(ell[h] - ell[i], 2) * q.values()[h];
      sj += W(j, h) * std::pow(ell[h] - ell[j], 2) * q.values()[h];
    }
    const double ref = (ell[i] - ell[j]) + beta * (std::log(q.values()[j]) - std::log(q.values()[i])) + alpha * (sj - si);
    EXPECT_NEAR(v[e], ref, 1e-14);
    EXPECT_EQ(v[e] + v[g.reverse(e)], 0.0);
  }
}

TEST(Velocities, RejectsBoundaryWeights) {
  const Graph g = Graph::from_undirected(2, {{0, 1, 1.0}});
  Vector q(2);
  q << 1.0, 0.0;
  EXPECT_THROW(velocities(Vector::Zero(2), WeightVector(q), g, 0.0, 1.0), Error);
}

TEST(Step, StationaryInputOnlyCountsTheStep) {
  Rng rng = make_rng(4);
  const Graph g = random_connected(7, rng);
  FlowConfig cfg;
  FlowState st;
  st.q = WeightVector::uniform(7);
  const FlowState out = step(st, Vector::Constant(7, 1.0), g, cfg);
  EXPECT_EQ(out.steps_done, 1u);
  EXPECT_EQ(out.q.values(), st.q.values());
  EXPECT_EQ(out.action, 0.0);
  EXPECT_EQ(out.time_elapsed, 0.0);
}

TEST(Step, ConservesMassAndPositivity) {
  Rng rng = make_rng(5);
  FlowConfig cfg;
  cfg.tau = 10.0;  // large nominal step, clipped by the adaptive rule
  cfg.alpha = 2.0;
  cfg.beta = 0.2;
  for (int t = 0; t < 200; ++t) {
    const Graph g = random_connected(8, rng);
    FlowState st;
    st.q = random_weights(8, rng);
    const FlowState out = step(st, random_losses(8, rng, 5.0), g, cfg);
    EXPECT_LE(std::abs(out.q.values().sum() - 1.0), 1e-12);
    EXPECT_GT(out.q.values().minCoeff(), 0.0);
  }
}

TEST(Step, NonFiniteVelocityIsDiagnosed) {
  const Graph g = Graph::from_undirected(2, {{0, 1, 1.0}});
  Vector ell(2);
  ell << 1e308, -1e308;
  FlowState st;
  st.q = WeightVector::uniform(2);
  try {
    step(st, ell, g, FlowConfig{});
    FAIL() << "expected a numerical failure";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::Numerical);
    EXPECT_NE(std::string(e.what()).find("step 0"), std::string::npos);
  }
}

TEST(Step, EulerIncrementMatchesUpwindDivergence) {
  // Non-adaptive, unguarded step: q' = q + tau * sum_j w_ij xi_ij exactly.
  Rng rng = make_rng(6);
  const Graph g = random_connected(6, rng);
  const Vector ell = random_losses(6, rng);
  const WeightVector q = random_weights(6, rng);
  FlowConfig cfg;
  cfg.adaptive = false;
  cfg.ascent_guard = false;
  cfg.tau = 1e-3;
  cfg.alpha = 0.5;
  cfg.beta = 0.8;
  const auto v = velocities(ell, q, g, cfg.alpha, cfg.beta);
  Vector dq = Vector::Zero(6);
  double kinetic = 0.0;
  for (std::size_t e = 0; e < v.size(); ++e) {
    const auto& ed = g.edges()[e];
    const double xi = upwind_flux(q[ed.src], q[ed.dst], v[e]);
    dq[static_cast<Eigen::Index>(ed.src)] += ed.weight * xi;
    kinetic += 0.5 * xi * v[e];
  }
  FlowState st;
  st.q = q;
  const FlowState out = step(st, ell, g, cfg);
  EXPECT_LE((out.q.values() - (q.values() + 1e-3 * dq)).cwiseAbs().maxCoeff(), 1e-16);
  EXPECT_NEAR(out.action, 1e-3 * kinetic, 1e-18);
  EXPECT_EQ(out.time_elapsed, 1e-3);
}

TEST(RunFlow, TwoNodeMatchesDenseOde) {
  Vector ell(2);
  ell << 0.3, 1.1;
  const double beta = 0.7, w = 1.4;
  const Graph g = Graph::from_undirected(2, {{0, 1, w}});
  FlowConfig cfg;
  cfg.adaptive = false;
  cfg.ascent_guard = false;
  cfg.tau = 1e-3;
  cfg.t_in = 1000;
  cfg.beta = beta;
  Vector q0(2);
  q0 << 0.8, 0.2;
  std::vector<double> risks;
  const FlowState st = run_flow(WeightVector(q0), ell, g, cfg, [&](const FlowTraceRow& r) { risks.push_back(r.risk); });
  // Reference: explicit Euler on the scalar ODE for q_0 with step 1e-5.
  double a = 0.8;
  for (int t = 0; t < 100000; ++t) {
    const double b = 1.0 - a;
    const double v = (ell[0] - ell[1]) + beta * (std::log(b) - std::log(a));
    a += 1e-5 * w * v * (v > 0 ? b : a);
  }
  EXPECT_NEAR(st.q[0], a, 1e-3);
  EXPECT_NEAR(st.time_elapsed, 1.0, 1e-12);
  for (std::size_t t = 1; t < risks.size(); ++t) EXPECT_GE(risks[t], risks[t - 1] - 1e-10);
  // Moving toward softmax(l / beta) from q_0 = 0.8.
  const double target = 1.0 / (1.0 + std::exp((ell[1] - ell[0]) / beta));
  EXPECT_LT(std::abs(st.q[0] - target), std::abs(0.8 - target));
}

TEST(RunFlow, TinyStepLeavesWeightsAlmostUnchanged) {
  Rng rng = make_rng(7);
  const Graph g = random_connected(6, rng);
  FlowConfig cfg;
  cfg.t_in = 1;
  cfg.tau = 1e-12;
  const WeightVector q0 = random_weights(6, rng);
  const FlowState st = run_flow(q0, random_losses(6, rng), g, cfg);
  EXPECT_LE((st.q.values() - q0.values()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(RunFlow, AlphaZeroConvergesToSoftmax) {
  Rng rng = make_rng(8);
  for (int t = 0; t < 5; ++t) {
    const Graph g = random_connected(10, rng);
    const Vector ell = random_losses(10, rng);
    FlowConfig cfg;
    cfg.t_in = 5000;
    cfg.tau = 0.5;
    cfg.beta = 1.0;
    const FlowState st = run_flow(WeightVector::uniform(10), ell, g, cfg);
    EXPECT_LE((st.q.values() - softmax(ell)).cwiseAbs().maxCoeff(), 1e-4);
  }
}

TEST(RunFlow, AscentAndActionMonotone) {
  Rng rng = make_rng(9);
  const Graph g = random_connected(15, rng);
  const Vector ell = random_losses(15, rng, 3.0);
  FlowConfig cfg;
  cfg.t_in = 500;
  cfg.tau = 1.0;
  cfg.alpha = 2.0;
  cfg.beta = 0.3;
  std::vector<FlowTraceRow> rows;
  const WeightVector q0 = WeightVector::uniform(15);
  run_flow(q0, ell, g, cfg, [&](const FlowTraceRow& r) { rows.push_back(r); });
  const double start = risk(ell, q0, g, {cfg.alpha, cfg.beta});
  EXPECT_GE(rows.front().risk, start - 1e-10);
  for (std::size_t t = 1; t < rows.size(); ++t) {
    EXPECT_GE(rows[t].risk, rows[t - 1].risk - 1e-10);
    EXPECT_GE(rows[t].action, rows[t - 1].action);
    EXPECT_GT(rows[t].min_q, 0.0);
  }
  EXPECT_GT(rows.back().action, 0.0);
}

TEST(RunFlow, ReportedRiskMatchesRecomputation) {
  Rng rng = make_rng(10);
  const Graph g = random_connected(9, rng);
  const Vector ell = random_losses(9, rng);
  FlowConfig cfg;
  cfg.t_in = 50;
  cfg.alpha = 1.5;
  cfg.beta = 0.5;
  const FlowState st = run_flow(WeightVector::uniform(9), ell, g, cfg);
  EXPECT_NEAR(st.last_risk, risk(ell, st.q, g, {cfg.alpha, cfg.beta}), 1e-12);
}

TEST(FlowConfig, Validation) {
  FlowConfig c;
  c.t_in = 0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.tau = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c = {};
  c.safety = 1.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(StationaryFixedPoint, AlphaZeroIsSoftmax) {
  const Graph g = Graph::from_undirected(2, {{0, 1, 1.0}});
  Vector ell(2);
  ell << 0, 1;
  const auto r = stationary_fixed_point(ell, g, 0.0, 1.0);
  EXPECT_NEAR(r.q[0], 0.268941, 1e-6);
  EXPECT_NEAR(r.q[1], 0.731059, 1e-6);
}

TEST(StationaryFixedPoint, EqualLossesGiveUniform) {
  Rng rng = make_rng(11);
  const Graph g = random_connected(8, rng);
  for (double alpha : {0.0, 1.0, 20.0}) {
    const auto r = stationary_fixed_point(Vector::Constant(8, 0.9), g, alpha, 0.5);
    EXPECT_LE((r.q.values().array() - 1.0 / 8.0).abs().maxCoeff(), 1e-14);
  }
}

TEST(StationaryFixedPoint, SatisfiesSelfConsistency) {
  Rng rng = make_rng(12);
  for (int t = 0; t < 5; ++t) {
    const Graph g = random_connected(20, rng);
    const Vector ell = random_losses(20, rng);
    const double tol = 1e-12;
    const auto r = stationary_fixed_point(ell, g, 2.0, 0.8, tol);
    // Independent transcription of the stationary condition.
    const Matrix W = dense_weights(g);
    Vector z(20);
    for (Eigen::Index i = 0; i < 20; ++i) {
      double s = 0.0;
      for (Eigen::Index j = 0; j < 20; ++j) s += r.q.values()[j] * W(i, j) * std::pow(ell[i] - ell[j], 2);
      z[i] = std::exp((ell[i] - 2.0 * s) / 0.8);
    }
    z /= z.sum();
    EXPECT_LE((z - r.q.values()).cwiseAbs().maxCoeff(), 10 * tol);
  }
}

TEST(StationaryFixedPoint, FlowLandsOnFixedPoint) {
  Rng rng = make_rng(13);
  for (int t = 0; t < 3; ++t) {
    const Graph g = random_connected(12, rng);
    const Vector ell = random_losses(12, rng);
    FlowConfig cfg;
    cfg.tau = 1.0;
    cfg.alpha = 1.0;
    cfg.beta = 0.7;
    const FlowState st = run_flow_to_stationarity(WeightVector::uniform(12), ell, g, cfg, 1e-9, 200000);
    const auto fp = stationary_fixed_point(ell, g, cfg.alpha, cfg.beta);
    EXPECT_LE((st.q.values() - fp.q.values()).cwiseAbs().maxCoeff(), 1e-4);
  }
}

TEST(StationaryFixedPoint, NonConvergenceCarriesResidual) {
  Rng rng = make_rng(14);
  const Graph g = random_connected(10, rng);
  try {
    stationary_fixed_point(random_losses(10, rng), g, 1.0, 0.5, 1e-12, 3);
    FAIL() << "expected non-convergence";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::NonConvergence);
    EXPECT_NE(std::string(e.what()).find("residual"), std::string::npos);
  }
  EXPECT_THROW(stationary_fixed_point(Vector::Zero(10), g, 0.0, 0.0), Error);
}

TEST(Softmax, StableForLargeInputs) {
  Vector z(3);
  z << 1000.0, 1001.0, 999.0;
  const Vector s = softmax(z);
  EXPECT_NEAR(s.sum(), 1.0, 1e-15);
  EXPECT_NEAR(s[1] / s[0], std::exp(1.0), 1e-12);
}
