#include "gcdro/models.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace gcdro;

namespace {

struct Problem {
  Dataset ds;
  Graph g;
  WeightVector q;
};

Problem random_problem(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.2, 1.5);
  Problem p;
  p.ds.X.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  p.ds.y.resize(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < p.ds.X.rows(); ++i) {
    for (Eigen::Index c = 0; c < p.ds.X.cols(); ++c) p.ds.X(i, c) = N(rng);
    p.ds.y[i] = N(rng);
  }
  p.ds.group_id.assign(n, 0);
  p.ds.noise_flag.assign(n, 0);
  std::vector<Edge> und;
  for (std::size_t i = 0; i + 1 < n; ++i) und.push_back({i, i + 1, U(rng)});
  und.push_back({0, n - 1, U(rng)});
  p.g = Graph::from_undirected(n, und);
  Vector q(static_cast<Eigen::Index>(n));
  for (auto& v : q) v = U(rng);
  p.q = WeightVector(q / q.sum());
  return p;
}

// Objective whose gradient weighted_risk_grad returns, evaluated from scratch.
double objective(const ModelParams& m, const Problem& p, double alpha, bool include_tv) {
  const LossVector ell = per_sample_loss(m, p.ds);
  double r = p.q.values().dot(ell);
  if (include_tv) r -= 0.5 * alpha * total_variation(ell, p.q, p.g);
  return r;
}

double max_rel_error(const ModelParams& m, const Problem& p, double alpha, bool include_tv) {
  const Vector analytic = flatten(weighted_risk_grad(m, p.ds, p.q, &p.g, alpha, include_tv));
  const Vector theta = flatten(m);
  const double h = 1e-5;
  double worst = 0.0;
  const double scale = std::max(analytic.cwiseAbs().maxCoeff(), 1e-8);
  for (Eigen::Index k = 0; k < theta.size(); ++k) {
    Vector tp = theta, tm = theta;
    tp[k] += h;
    tm[k] -= h;
    const double fd = (objective(unflatten(m, tp), p, alpha, include_tv) - objective(unflatten(m, tm), p, alpha, include_tv)) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic[k]) / std::max(std::abs(fd), scale));
  }
  return worst;
}

ModelParams random_linear(std::size_t d, Rng& rng) {
  std::normal_distribution<double> N(0.0, 1.0);
  LinearModel m = make_linear(d);
  for (auto& v : m.theta) v = N(rng);
  m.bias = N(rng);
  return m;
}

ModelParams random_mlp(std::size_t d, std::size_t h, Rng& rng, Activation a) {
  MlpModel m = make_mlp(d, h, rng, a);
  std::normal_distribution<double> N(0.0, 0.5);
  for (auto& v : m.b1) v = N(rng);
  m.b2 = N(rng);
  return m;
}

}  // namespace

TEST(PerSampleLoss, Examples) {
  Dataset ds;
  ds.X = Matrix::Constant(1, 1, 2.0);
  ds.y = Vector::Constant(1, 1.0);
  LinearModel m{Vector::Constant(1, 1.0), 0.0};
  EXPECT_EQ(per_sample_loss(m, ds)[0], 1.0);
  m.theta.setZero();
  ds.y.setZero();
  EXPECT_EQ(per_sample_loss(m, ds)[0], 0.0);

  Rng rng = make_rng(1);
  MlpModel z = make_mlp(3, 4, rng);
  z.W1.setZero();
  z.w2.setZero();
  Dataset d3;
  d3.X = Matrix::Ones(5, 3);
  d3.y = Vector::Constant(5, 1.5);
  EXPECT_LE((per_sample_loss(z, d3).array() - 2.25).abs().maxCoeff(), 1e-15);
}

TEST(PerSampleLoss, DimensionMismatch) {
  Dataset ds;
  ds.X = Matrix::Ones(3, 2);
  ds.y = Vector::Ones(3);
  EXPECT_THROW(per_sample_loss(make_linear(3), ds), Error);
  ds.y = Vector::Ones(2);
  EXPECT_THROW(per_sample_loss(make_linear(2), ds), Error);
}

TEST(Predict, MlpMatchesNaiveLoops) {
  Rng rng = make_rng(2);
  for (Activation a : {Activation::Relu, Activation::Tanh}) {
    const MlpModel m = std::get<MlpModel>(random_mlp(4, 6, rng, a));
    const auto p = random_problem(7, 4, 3);
    const Vector f = predict(m, p.ds.X);
    for (Eigen::Index i = 0; i < 7; ++i) {
      double out = m.b2;
      for (Eigen::Index h = 0; h < 6; ++h) {
        double z = m.b1[h];
        for (Eigen::Index c = 0; c < 4; ++c) z += m.W1(h, c) * p.ds.X(i, c);
        out += m.w2[h] * (a == Activation::Relu ? std::max(z, 0.0) : std::tanh(z));
      }
      EXPECT_NEAR(f[i], out, 1e-12);
    }
  }
}

TEST(Gradient, LinearMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = random_problem(5 + s % 6, 2 + s % 4, 10 + s);
    Rng rng = make_rng(50 + s);
    const auto m = random_linear(p.ds.d(), rng);
    EXPECT_LE(max_rel_error(m, p, 0.0, false), 1e-6);
    EXPECT_LE(max_rel_error(m, p, 1.7, false), 1e-6);
    EXPECT_LE(max_rel_error(m, p, 1.7, true), 1e-6);
  }
}

TEST(Gradient, MlpMatchesFiniteDifferences) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = random_problem(5 + s % 6, 2 + s % 4, 100 + s);
    Rng rng = make_rng(150 + s);
    // tanh keeps the objective smooth; ReLU kinks are avoided by the bias draw.
    const auto a = s % 2 ? Activation::Tanh : Activation::Relu;
    const auto m = random_mlp(p.ds.d(), 5, rng, a);
    EXPECT_LE(max_rel_error(m, p, 0.0, false), 1e-4);
    EXPECT_LE(max_rel_error(m, p, 2.0, true), 1e-4);
  }
}

TEST(Gradient, UniformAlphaZeroIsErmGradient) {
  const auto p = random_problem(8, 3, 4);
  Rng rng = make_rng(5);
  const auto m = random_linear(3, rng);
  const Vector g = flatten(weighted_risk_grad(m, p.ds, WeightVector::uniform(8), &p.g, 0.0, true));
  const auto& lin = std::get<LinearModel>(m);
  const Vector r = (p.ds.X * lin.theta).array() + lin.bias - p.ds.y.array();
  Vector erm(4);
  erm << 2.0 / 8.0 * p.ds.X.transpose() * r, 2.0 / 8.0 * r.sum();
  EXPECT_LE((g - erm).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Gradient, EqualLossesMakeTvTermVanish) {
  auto p = random_problem(6, 2, 6);
  const LinearModel m{Vector::Zero(2), 0.0};
  p.ds.y = Vector::Constant(6, 0.8);  // every loss equals 0.64
  const Vector a = flatten(weighted_risk_grad(m, p.ds, p.q, &p.g, 5.0, true));
  const Vector b = flatten(weighted_risk_grad(m, p.ds, p.q, &p.g, 5.0, false));
  EXPECT_EQ(a, b);
}

TEST(Gradient, Errors) {
  const auto p = random_problem(6, 2, 7);
  EXPECT_THROW(weighted_risk_grad(make_linear(3), p.ds, p.q, &p.g, 0.0, false), Error);
  EXPECT_THROW(weighted_risk_grad(make_linear(2), p.ds, WeightVector::uniform(5), &p.g, 0.0, false), Error);
  EXPECT_THROW(weighted_risk_grad(make_linear(2), p.ds, p.q, nullptr, 1.0, true), Error);
  Vector off = p.q.values();
  off[0] += 1e-6;
  EXPECT_THROW(weighted_risk_grad(make_linear(2), p.ds, WeightVector::trusted(off), &p.g, 0.0, false), Error);
}

TEST(Flatten, RoundTrip) {
  Rng rng = make_rng(8);
  const ModelParams m = random_mlp(3, 4, rng, Activation::Tanh);
  EXPECT_EQ(num_params(m), 3u * 4 + 4 + 4 + 1);
  const Vector v = flatten(m);
  EXPECT_EQ(flatten(unflatten(m, v)), v);
  EXPECT_THROW(unflatten(m, Vector::Zero(3)), Error);
}

TEST(Adam, ZeroGradientKeepsParams) {
  Rng rng = make_rng(9);
  const ModelParams m = random_linear(3, rng);
  auto st = AdamState::for_model(m, 0.01);
  auto [next, st2] = adam_step(m, ModelParams{LinearModel{Vector::Zero(3), 0.0}}, st);
  EXPECT_EQ(flatten(next), flatten(m));
  EXPECT_EQ(st2.step, 1u);
}

TEST(Adam, ConstantGradientGivesUnitSteps) {
  ModelParams m = LinearModel{Vector::Zero(2), 0.0};
  const ModelParams g = LinearModel{(Vector(2) << 3.0, -0.02).finished(), 1e3};
  auto st = AdamState::for_model(m, 1e-3);
  for (int t = 0; t < 1000; ++t) {
    const Vector before = flatten(m);
    auto [next, s] = adam_step(m, g, std::move(st));
    st = std::move(s);
    const Vector delta = (flatten(next) - before).cwiseAbs();
    for (Eigen::Index k = 0; k < delta.size(); ++k) {
      EXPECT_GE(delta[k], 1e-3 * 0.99);
      EXPECT_LE(delta[k], 1e-3 * 1.01);
    }
    m = next;
  }
}

TEST(Adam, MatchesScalarReference) {
  // Scalar transcription of the bias-corrected update on a varying gradient.
  double x = 0.5, mo = 0.0, vo = 0.0;
  ModelParams m = LinearModel{Vector::Constant(1, 0.5), 0.0};
  auto st = AdamState::for_model(m, 0.05);
  for (int t = 1; t <= 50; ++t) {
    const double gx = 2.0 * x + std::sin(t);
    mo = 0.9 * mo + 0.1 * gx;
    vo = 0.999 * vo + 0.001 * gx * gx;
    x -= 0.05 * (mo / (1 - std::pow(0.9, t))) / (std::sqrt(vo / (1 - std::pow(0.999, t))) + 1e-8);
    auto [next, s] = adam_step(m, ModelParams{LinearModel{Vector::Constant(1, 2.0 * std::get<LinearModel>(m).theta[0] + std::sin(t)), 0.0}}, std::move(st));
    m = next;
    st = std::move(s);
    EXPECT_NEAR(std::get<LinearModel>(m).theta[0], x, 1e-12);
  }
}

TEST(Adam, Deterministic) {
  auto run = [] {
    auto p = random_problem(10, 3, 11);
    ModelParams m = make_linear(3);
    auto st = AdamState::for_model(m, 0.01);
    for (int t = 0; t < 100; ++t) {
      auto [next, s] = adam_step(m, weighted_risk_grad(m, p.ds, p.q, &p.g, 1.0, true), std::move(st));
      m = next;
      st = std::move(s);
    }
    return flatten(m);
  };
  EXPECT_EQ(run(), run());
}

TEST(Adam, ShapeMismatch) {
  const ModelParams m = make_linear(2);
  EXPECT_THROW(adam_step(m, ModelParams{make_linear(3)}, AdamState::for_model(m)), Error);
}

TEST(Wls, FitExamples) {
  Vector x(3), w(3);
  x << 1, -2, 0.5;
  w << 0.2, 0.5, 0.3;
  EXPECT_NEAR(wls_fit_1d(x, 2.0 * x, w), 2.0, 1e-15);
  EXPECT_EQ(wls_fit_1d(Vector::Ones(1), Vector::Constant(1, 3.0), Vector::Ones(1)), 3.0);
  EXPECT_THROW(wls_fit_1d(Vector::Zero(2), Vector::Ones(2), Vector::Constant(2, 0.5)), Error);
}

TEST(Wls, FitMatchesGridSearch) {
  Rng rng = make_rng(12);
  std::normal_distribution<double> N(0.0, 1.0);
  std::uniform_real_distribution<double> U(0.1, 1.0);
  Vector x(8), y(8), w(8);
  for (Eigen::Index i = 0; i < 8; ++i) {
    x[i] = N(rng);
    y[i] = 1.3 * x[i] + N(rng);
    w[i] = U(rng);
  }
  w /= w.sum();
  double best = 0.0, best_val = std::numeric_limits<double>::infinity();
  for (double t = -5.0; t <= 5.0; t += 1e-4) {
    const double val = (w.array() * (y - t * x).array().square()).sum();
    if (val < best_val) {
      best_val = val;
      best = t;
    }
  }
  EXPECT_NEAR(wls_fit_1d(x, y, w), best, 1e-4);
}

TEST(Wls, VarianceExamples) {
  EXPECT_EQ(wls_variance({Vector::Ones(1), Vector::Ones(1), Vector::Ones(1)}), 1.0);
  WlsInstance two{Vector::Ones(2), (Vector(2) << 1, 4).finished(), (Vector(2) << 0.8, 0.2).finished()};
  EXPECT_NEAR(wls_variance(two), 0.8, 1e-15);
  // Grid over w_c in steps of 1e-3: the minimum sits at w_o / w_c = 1/4.
  double best_wc = 0.0, best_v = std::numeric_limits<double>::infinity();
  for (int k = 1; k < 1000; ++k) {
    two.w << k * 1e-3, 1.0 - k * 1e-3;
    const double v = wls_variance(two);
    if (v < best_v) {
      best_v = v;
      best_wc = k * 1e-3;
    }
  }
  EXPECT_NEAR(best_wc, 0.8, 1e-3);
  EXPECT_NEAR((1.0 - best_wc) / best_wc, 0.25, 2e-3);
  EXPECT_NEAR(best_v, 0.8, 1e-6);
}

TEST(Wls, VarianceValidation) {
  EXPECT_THROW(wls_variance({Vector::Ones(2), Vector::Ones(2), Vector::Ones(2)}), Error);
  EXPECT_THROW(wls_variance({Vector::Ones(1), Vector::Zero(1), Vector::Ones(1)}), Error);
  EXPECT_THROW(wls_variance({Vector::Zero(1), Vector::Ones(1), Vector::Ones(1)}), Error);
}

TEST(Wls, ExcessVarianceMonotoneAboveOptimum) {
  // sigma_c^2 = 1, sigma_o^2 = 4: optimum ratio 0.25; larger ratios are worse.
  double prev = 0.0;
  for (double ratio : {0.5, 1.0, 2.0, 4.0}) {
    const double wc = 1.0 / (1.0 + ratio);
    const double v = wls_variance({Vector::Ones(2), (Vector(2) << 1, 4).finished(), (Vector(2) << wc, 1.0 - wc).finished()});
    EXPECT_GT(v, prev);
    prev = v;
  }
}

TEST(Wls, MonteCarloMatchesClosedForm) {
  Rng rng = make_rng(13);
  std::normal_distribution<double> N(0.0, 1.0);
  Vector x(4), s2(4), w(4);
  x << 1.0, -0.5, 2.0, 0.7;
  s2 << 1.0, 2.0, 0.5, 4.0;
  w << 0.4, 0.2, 0.3, 0.1;
  const double theta = 1.5;
  std::vector<double> est;
  for (int r = 0; r < 10000; ++r) {
    Vector y(4);
    for (Eigen::Index i = 0; i < 4; ++i) y[i] = theta * x[i] + std::sqrt(s2[i]) * N(rng);
    est.push_back(wls_fit_1d(x, y, w));
  }
  const Vector e = Eigen::Map<Vector>(est.data(), static_cast<Eigen::Index>(est.size()));
  const double var = (e.array() - e.mean()).square().sum() / static_cast<double>(e.size() - 1);
  const double closed = wls_variance({x, s2, w});
  EXPECT_NEAR(var / closed, 1.0, 0.02);
}

TEST(Checkpoint, RoundTripIsExact) {
  const auto dir = std::filesystem::temp_directory_path();
  Rng rng = make_rng(14);
  for (const ModelParams& m : {random_linear(4, rng), random_mlp(3, 5, rng, Activation::Tanh)}) {
    const auto path = (dir / "gcdro_ckpt_test.txt").string();
    save_checkpoint(m, path);
    const ModelParams back = load_checkpoint(path);
    EXPECT_EQ(back.index(), m.index());
    EXPECT_EQ(flatten(back), flatten(m));
    if (const auto* mlp = std::get_if<MlpModel>(&back)) {
    EXPECT_EQ(mlp->activation, Activation::Tanh);
  }
  }
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = (std::filesystem::temp_directory_path() / "gcdro_ckpt_bad.txt").string();
  std::ofstream(path) << "not a checkpoint\n";
  EXPECT_THROW(load_checkpoint(path), Error);
  EXPECT_THROW(load_checkpoint("/nonexistent/ckpt"), Error);
}
