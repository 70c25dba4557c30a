#pragma once

// Predictors with squared-error losses, analytic gradients of the weighted and
// calibrated objectives, Adam, and the weighted-least-squares helpers.

#include "gcdro/datagen.hpp"
#include "gcdro/risk.hpp"

#include <fstream>
#include <string>
#include <variant>

namespace gcdro {

enum class Activation { Relu, Tanh };

inline const char* to_string(Activation a) { return a == Activation::Relu ? "relu" : "tanh"; }

inline Activation parse_activation(std::string_view s) {
  if (s == "relu") return Activation::Relu;
  if (s == "tanh") return Activation::Tanh;
  fail(ErrorKind::InvalidConfig, "unknown activation '", s, "'");
}

struct LinearModel {
  Vector theta;
  double bias = 0.0;
};

// f(x) = w2' act(W1 x + b1) + b2
struct MlpModel {
  Matrix W1;  // h x d
  Vector b1;  // h
  Vector w2;  // h (the 1 x h output layer)
  double b2 = 0.0;
  Activation activation = Activation::Relu;
};

using ModelParams = std::variant<LinearModel, MlpModel>;

inline LinearModel make_linear(std::size_t d) { return {Vector::Zero(static_cast<Eigen::Index>(d)), 0.0}; }

// Gaussian init with std 1/sqrt(fan_in), zero biases.
inline MlpModel make_mlp(std::size_t d, std::size_t hidden, Rng& rng, Activation act = Activation::Relu) {
  require(d >= 1 && hidden >= 1, ErrorKind::InvalidConfig, "MLP needs d >= 1 and hidden >= 1");
  MlpModel m;
  m.activation = act;
  const auto h = static_cast<Eigen::Index>(hidden);
  m.W1.resize(h, static_cast<Eigen::Index>(d));
  std::normal_distribution<double> in(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
  std::normal_distribution<double> out(0.0, 1.0 / std::sqrt(static_cast<double>(hidden)));
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index c = 0; c < m.W1.cols(); ++c) m.W1(r, c) = in(rng);
  m.b1 = Vector::Zero(h);
  m.w2.resize(h);
  for (Eigen::Index r = 0; r < h; ++r) m.w2[r] = out(rng);
  m.b2 = 0.0;
  return m;
}

inline std::size_t input_dim(const ModelParams& m) {
  return std::visit([](const auto& p) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(p)>, LinearModel>)
      return static_cast<std::size_t>(p.theta.size());
    else
      return static_cast<std::size_t>(p.W1.cols());
  }, m);
}

namespace detail {

inline Matrix activate(const Matrix& Z, Activation a) {
  return a == Activation::Relu ? Matrix(Z.cwiseMax(0.0)) : Matrix(Z.array().tanh().matrix());
}

inline Matrix activate_derivative(const Matrix& Z, Activation a) {
  if (a == Activation::Relu) return (Z.array() > 0.0).cast<double>().matrix();
  return (1.0 - Z.array().tanh().square()).matrix();
}

inline void check_dim(const ModelParams& m, const Matrix& X) {
  require(input_dim(m) == static_cast<std::size_t>(X.cols()), ErrorKind::DimensionMismatch, "model expects ",
          input_dim(m), " features, data has ", X.cols());
}

}  // namespace detail

inline Vector predict(const ModelParams& m, const Matrix& X) {
  detail::check_dim(m, X);
  if (const auto* lin = std::get_if<LinearModel>(&m)) return (X * lin->theta).array() + lin->bias;
  const auto& mlp = std::get<MlpModel>(m);
  const Matrix Z = (X * mlp.W1.transpose()).rowwise() + mlp.b1.transpose();
  return (detail::activate(Z, mlp.activation) * mlp.w2).array() + mlp.b2;
}

/// l_i = (f(x_i) - y_i)^2, no 1/2 factor.
inline LossVector per_sample_loss(const ModelParams& m, const Matrix& X, const Vector& y) {
  require(X.rows() == y.size(), ErrorKind::DimensionMismatch, "X has ", X.rows(), " rows, y has ", y.size());
  return (predict(m, X) - y).array().square();
}

inline LossVector per_sample_loss(const ModelParams& m, const Dataset& ds) { return per_sample_loss(m, ds.X, ds.y); }

// ---------------------------------------------------------------------------
// Flat parameter views (Adam and checkpoints operate on these)

inline std::size_t num_params(const ModelParams& m) {
  if (const auto* lin = std::get_if<LinearModel>(&m)) return static_cast<std::size_t>(lin->theta.size()) + 1;
  const auto& p = std::get<MlpModel>(m);
  return static_cast<std::size_t>(p.W1.size() + p.b1.size() + p.w2.size()) + 1;
}

inline Vector flatten(const ModelParams& m) {
  Vector v(static_cast<Eigen::Index>(num_params(m)));
  if (const auto* lin = std::get_if<LinearModel>(&m)) {
    v << lin->theta, lin->bias;
    return v;
  }
  const auto& p = std::get<MlpModel>(m);
  Eigen::Index o = 0;
  for (Eigen::Index r = 0; r < p.W1.rows(); ++r)
    for (Eigen::Index c = 0; c < p.W1.cols(); ++c) v[o++] = p.W1(r, c);
  v.segment(o, p.b1.size()) = p.b1;
  o += p.b1.size();
  v.segment(o, p.w2.size()) = p.w2;
  o += p.w2.size();
  v[o] = p.b2;
  return v;
}

inline ModelParams unflatten(const ModelParams& shape, const Vector& v) {
  require(static_cast<std::size_t>(v.size()) == num_params(shape), ErrorKind::DimensionMismatch,
          "parameter vector has ", v.size(), " entries, model needs ", num_params(shape));
  if (const auto* lin = std::get_if<LinearModel>(&shape)) {
    return LinearModel{v.head(lin->theta.size()), v[lin->theta.size()]};
  }
  MlpModel p = std::get<MlpModel>(shape);
  Eigen::Index o = 0;
  for (Eigen::Index r = 0; r < p.W1.rows(); ++r)
    for (Eigen::Index c = 0; c < p.W1.cols(); ++c) p.W1(r, c) = v[o++];
  p.b1 = v.segment(o, p.b1.size());
  o += p.b1.size();
  p.w2 = v.segment(o, p.w2.size());
  o += p.w2.size();
  p.b2 = v[o];
  return p;
}

/// grad_theta sum_i c_i l_i for arbitrary per-sample coefficients c.
inline ModelParams loss_combination_grad(const ModelParams& m, const Matrix& X, const Vector& y, const Vector& c) {
  detail::check_dim(m, X);
  require(c.size() == y.size() && X.rows() == y.size(), ErrorKind::DimensionMismatch, "coefficient/sample count mismatch");
  if (const auto* lin = std::get_if<LinearModel>(&m)) {
    const Vector g = 2.0 * c.cwiseProduct((X * lin->theta).array().matrix() + Vector::Constant(y.size(), lin->bias) - y);
    return LinearModel{X.transpose() * g, g.sum()};
  }
  const auto& p = std::get<MlpModel>(m);
  const Matrix Z = (X * p.W1.transpose()).rowwise() + p.b1.transpose();
  const Matrix A = detail::activate(Z, p.activation);
  const Vector residual = (A * p.w2).array() + p.b2 - y.array();
  const Vector g = 2.0 * c.cwiseProduct(residual);
  MlpModel out;
  out.activation = p.activation;
  out.w2 = A.transpose() * g;
  out.b2 = g.sum();
  const Matrix dZ = (g * p.w2.transpose()).cwiseProduct(detail::activate_derivative(Z, p.activation));
  out.W1 = dZ.transpose() * X;
  out.b1 = dZ.colwise().sum().transpose();
  return out;
}

/// dR/dl_i for R = sum q l - (alpha/2) TV:  q_i (1 - 2 alpha sum_j w_ij q_j (l_i - l_j)).
inline Vector risk_loss_coefficients(const LossVector& ell, const Vector& q, const Graph* g, double alpha, bool include_tv) {
  if (!include_tv || alpha == 0.0 || g == nullptr) return q;
  Vector c(q.size());
  for (std::size_t i = 0; i < g->n(); ++i) {
    const double li = ell[static_cast<Eigen::Index>(i)];
    double acc = 0.0;
    for (const auto& e : g->neighbors(i)) acc += e.weight * q[static_cast<Eigen::Index>(e.dst)] * (li - ell[static_cast<Eigen::Index>(e.dst)]);
    c[static_cast<Eigen::Index>(i)] = q[static_cast<Eigen::Index>(i)] * (1.0 - 2.0 * alpha * acc);
  }
  return c;
}

inline ModelParams weighted_risk_grad(const ModelParams& m, const Dataset& ds, const WeightVector& q, const Graph* g,
                                      double alpha, bool include_tv) {
  require(q.size() == ds.n(), ErrorKind::DimensionMismatch, "weights ", q.size(), " vs samples ", ds.n());
  require(std::abs(q.values().sum() - 1.0) <= 1e-8, ErrorKind::InvalidConfig, "weights are off the simplex");
  if (include_tv && alpha != 0.0) {
    require(g != nullptr && g->n() == ds.n(), ErrorKind::DimensionMismatch, "calibrated gradient needs a graph over the samples");
  }
  const LossVector ell = per_sample_loss(m, ds);
  return loss_combination_grad(m, ds.X, ds.y, risk_loss_coefficients(ell, q.values(), g, alpha, include_tv));
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  Vector m;
  Vector v;
  std::uint64_t step = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_model(const ModelParams& p, double lr = 1e-3) {
    AdamState s;
    s.m = Vector::Zero(static_cast<Eigen::Index>(num_params(p)));
    s.v = s.m;
    s.lr = lr;
    return s;
  }
};

inline std::pair<ModelParams, AdamState> adam_step(const ModelParams& params, const ModelParams& grad, AdamState st) {
  const Vector g = flatten(grad);
  require(g.size() == st.m.size() && g.size() == static_cast<Eigen::Index>(num_params(params)),
          ErrorKind::DimensionMismatch, "Adam state/gradient shape mismatch");
  ++st.step;
  st.m = st.beta1 * st.m + (1.0 - st.beta1) * g;
  st.v = st.beta2 * st.v + (1.0 - st.beta2) * g.cwiseProduct(g);
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  const Vector update = st.lr * (st.m / c1).array() / ((st.v / c2).array().sqrt() + st.eps);
  return {unflatten(params, flatten(params) - update), std::move(st)};
}

// ---------------------------------------------------------------------------
// Weighted least squares, 1-D, no intercept

struct WlsInstance {
  Vector x;
  Vector sigma2;
  Vector w;

  void validate() const {
    require(x.size() == sigma2.size() && x.size() == w.size() && x.size() > 0, ErrorKind::DimensionMismatch,
            "WLS instance vectors must have equal nonzero length");
    require(std::abs(w.sum() - 1.0) <= 1e-12, ErrorKind::InvalidConfig, "WLS weights sum to ", w.sum());
    require(w.minCoeff() >= 0.0, ErrorKind::InvalidConfig, "WLS weights must be nonnegative");
    require(sigma2.minCoeff() > 0.0, ErrorKind::InvalidConfig, "noise variances must be positive");
  }
};

inline double wls_fit_1d(const Vector& x, const Vector& y, const Vector& w) {
  require(x.size() == y.size() && x.size() == w.size(), ErrorKind::DimensionMismatch, "wls_fit_1d: length mismatch");
  const double den = (w.array() * x.array().square()).sum();
  require(den > 0.0, ErrorKind::Numerical, "wls_fit_1d: degenerate denominator sum w x^2 = ", den);
  return (w.array() * x.array() * y.array()).sum() / den;
}

/// Var[theta_hat | X] = sum w^2 x^2 s^2 / (sum w x^2)^2
inline double wls_variance(const WlsInstance& inst) {
  inst.validate();
  const double den = (inst.w.array() * inst.x.array().square()).sum();
  require(den > 0.0, ErrorKind::Numerical, "wls_variance: zero denominator");
  return (inst.w.array().square() * inst.x.array().square() * inst.sigma2.array()).sum() / (den * den);
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Text format, one array per line:
//   gcdro-checkpoint 1
//   model linear|mlp
//   activation relu|tanh        (mlp only)
//   <name> <rows> <cols> v0 v1 ...   (row-major, %.17g)
// Linear arrays: theta (d x 1), bias (1 x 1). MLP: W1 (h x d), b1 (h x 1),
// w2 (h x 1), b2 (1 x 1).

namespace detail {

inline void write_array(std::ostream& out, const char* name, const Matrix& a) {
  out << name << ' ' << a.rows() << ' ' << a.cols();
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) out << ' ' << format_real(a(r, c));
  out << '\n';
}

inline Matrix read_array(std::istream& in, const char* name) {
  std::string got;
  Eigen::Index rows = 0, cols = 0;
  in >> got >> rows >> cols;
  require(in.good() && got == name && rows >= 0 && cols >= 0, ErrorKind::Parse, "checkpoint: expected array '", name, "'");
  Matrix a(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      std::string tok;
      in >> tok;
      auto v = parse_real(tok);
      require(v.has_value(), ErrorKind::Parse, "checkpoint: bad value '", tok, "' in '", name, "'");
      a(r, c) = *v;
    }
  return a;
}

}  // namespace detail

inline void save_checkpoint(const ModelParams& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write checkpoint '", path, "'");
  out << "gcdro-checkpoint 1\n";
  if (const auto* lin = std::get_if<LinearModel>(&m)) {
    out << "model linear\n";
    detail::write_array(out, "theta", lin->theta);
    detail::write_array(out, "bias", Matrix::Constant(1, 1, lin->bias));
  } else {
    const auto& p = std::get<MlpModel>(m);
    out << "model mlp\nactivation " << to_string(p.activation) << '\n';
    detail::write_array(out, "W1", p.W1);
    detail::write_array(out, "b1", p.b1);
    detail::write_array(out, "w2", p.w2);
    detail::write_array(out, "b2", Matrix::Constant(1, 1, p.b2));
  }
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open checkpoint '", path, "'");
  std::string magic, kind;
  int version = 0;
  in >> magic >> version;
  require(magic == "gcdro-checkpoint" && version == 1, ErrorKind::Parse, "'", path, "' is not a version-1 checkpoint");
  in >> magic >> kind;
  require(magic == "model", ErrorKind::Parse, "checkpoint: missing model line");
  if (kind == "linear") {
    const Matrix theta = detail::read_array(in, "theta");
    const Matrix bias = detail::read_array(in, "bias");
    require(theta.cols() == 1 && bias.size() == 1, ErrorKind::Parse, "checkpoint: bad linear shapes");
    return LinearModel{Vector(theta.col(0)), bias(0, 0)};
  }
  require(kind == "mlp", ErrorKind::Parse, "checkpoint: unknown model kind '", kind, "'");
  std::string act;
  in >> magic >> act;
  require(magic == "activation", ErrorKind::Parse, "checkpoint: missing activation");
  MlpModel p;
  p.activation = parse_activation(act);
  p.W1 = detail::read_array(in, "W1");
  const Matrix b1 = detail::read_array(in, "b1");
  const Matrix w2 = detail::read_array(in, "w2");
  const Matrix b2 = detail::read_array(in, "b2");
  require(b1.rows() == p.W1.rows() && w2.rows() == p.W1.rows() && b1.cols() == 1 && w2.cols() == 1 && b2.size() == 1,
          ErrorKind::Parse, "checkpoint: inconsistent MLP shapes");
  p.b1 = b1.col(0);
  p.w2 = w2.col(0);
  p.b2 = b2(0, 0);
  return p;
}

}  // namespace gcdro
