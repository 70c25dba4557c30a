#pragma once

// Calibrated risk
//
//   R(q) = sum_i q_i l_i - (alpha/2) TV(q) - beta sum_i q_i log q_i,
//   TV(q) = sum_{(i,j) in E} w_ij q_i q_j (l_i - l_j)^2,
//
// where the sum runs over the orientation-closed directed edge list (each
// undirected edge counted twice), and its free-energy form
//
//   E(q) = q'Kq + q'V - beta H(q),   H(q) = -sum_i q_i log q_i.

#include "gcdro/graph.hpp"
#include "gcdro/weights.hpp"

#include <string>
#include <string_view>
#include <vector>

namespace gcdro {

using LossVector = Vector;

struct RiskConfig {
  double alpha = 0.0;
  double beta = 1.0;

  void validate() const {
    require(alpha >= 0.0 && std::isfinite(alpha), ErrorKind::InvalidConfig, "alpha must be >= 0, got ", alpha);
    require(beta >= 0.0 && std::isfinite(beta), ErrorKind::InvalidConfig, "beta must be >= 0, got ", beta);
  }
};

namespace detail {

inline void check_sizes(const LossVector& ell, std::size_t nq, const Graph& g) {
  require(static_cast<std::size_t>(ell.size()) == nq && g.n() == nq, ErrorKind::DimensionMismatch,
          "size mismatch: losses ", ell.size(), ", weights ", nq, ", graph ", g.n());
}

}  // namespace detail

/// S_i = sum_{h in N(i)} w_ih (l_h - l_i)^2 q_h, the per-node interaction
/// pressure. TV(q) = sum_i q_i S_i.
inline Vector interaction_sums(const LossVector& ell, const Vector& q, const Graph& g) {
  Vector s = Vector::Zero(static_cast<Eigen::Index>(g.n()));
  for (std::size_t i = 0; i < g.n(); ++i) {
    const double li = ell[static_cast<Eigen::Index>(i)];
    double acc = 0.0;
    for (const auto& e : g.neighbors(i)) {
      const double diff = ell[static_cast<Eigen::Index>(e.dst)] - li;
      acc += e.weight * diff * diff * q[static_cast<Eigen::Index>(e.dst)];
    }
    s[static_cast<Eigen::Index>(i)] = acc;
  }
  return s;
}

inline double total_variation(const LossVector& ell, const WeightVector& q, const Graph& g) {
  detail::check_sizes(ell, q.size(), g);
  double tv = 0.0;
  for (const auto& e : g.edges()) {
    const double diff = ell[static_cast<Eigen::Index>(e.src)] - ell[static_cast<Eigen::Index>(e.dst)];
    tv += e.weight * q[e.src] * q[e.dst] * diff * diff;
  }
  return tv;
}

/// Shannon entropy (natural log) of an interior weight vector.
inline double entropy(const WeightVector& q) {
  q.require_interior();
  double h = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) h -= q[i] * std::log(q[i]);
  return h;
}

// Entropy with the 0 log 0 = 0 convention, used for boundary weights.
inline double entropy_boundary(const Vector& q) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < q.size(); ++i)
    if (q[i] > 0.0) h -= q[i] * std::log(q[i]);
  return h;
}

inline double risk(const LossVector& ell, const WeightVector& q, const Graph& g, const RiskConfig& cfg) {
  detail::check_sizes(ell, q.size(), g);
  const double weighted = q.values().dot(ell);
  const double tv = cfg.alpha == 0.0 ? 0.0 : total_variation(ell, q, g);
  const double h = cfg.beta == 0.0 ? entropy_boundary(q.values()) : entropy(q);
  return weighted - 0.5 * cfg.alpha * tv + cfg.beta * h;
}

// ---------------------------------------------------------------------------
// Free energy

enum class InteractionKind { None, ScaledIdentity, EdgeSparse, Dense };

struct FreeEnergySpec {
  std::size_t n = 0;
  InteractionKind kind = InteractionKind::None;
  double identity_scale = 0.0;   // K = identity_scale * I
  std::vector<Edge> edge_values;  // K_ij stored in Edge::weight, directed and symmetric
  Matrix dense;                   // K for InteractionKind::Dense
  Vector V;
  double beta = 0.0;
  bool has_entropy = false;

  Matrix interaction_matrix() const {
    Matrix K = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    switch (kind) {
      case InteractionKind::None: break;
      case InteractionKind::ScaledIdentity: K.diagonal().setConstant(identity_scale); break;
      case InteractionKind::EdgeSparse:
        for (const auto& e : edge_values) K(static_cast<Eigen::Index>(e.src), static_cast<Eigen::Index>(e.dst)) += e.weight;
        break;
      case InteractionKind::Dense: K = dense; break;
    }
    return K;
  }

  void validate() const {
    require(static_cast<std::size_t>(V.size()) == n, ErrorKind::DimensionMismatch, "potential has size ", V.size(),
            ", expected ", n);
    require(beta >= 0.0, ErrorKind::InvalidConfig, "temperature must be >= 0");
    if (kind == InteractionKind::Dense) {
      require(static_cast<std::size_t>(dense.rows()) == n && static_cast<std::size_t>(dense.cols()) == n,
              ErrorKind::DimensionMismatch, "interaction matrix must be ", n, "x", n);
      require((dense - dense.transpose()).cwiseAbs().maxCoeff() <= 1e-12, ErrorKind::InvalidConfig,
              "interaction matrix is not symmetric");
    }
    for (const auto& e : edge_values)
      require(e.src < n && e.dst < n, ErrorKind::DimensionMismatch, "interaction entry out of range");
  }
};

inline double free_energy(const FreeEnergySpec& spec, const WeightVector& q) {
  spec.validate();
  require(q.size() == spec.n, ErrorKind::DimensionMismatch, "free_energy: weights ", q.size(), " vs spec ", spec.n);
  const Vector& qv = q.values();
  double interaction = 0.0;
  switch (spec.kind) {
    case InteractionKind::None: break;
    case InteractionKind::ScaledIdentity: interaction = spec.identity_scale * qv.squaredNorm(); break;
    case InteractionKind::EdgeSparse:
      for (const auto& e : spec.edge_values) interaction += e.weight * qv[static_cast<Eigen::Index>(e.src)] * qv[static_cast<Eigen::Index>(e.dst)];
      break;
    case InteractionKind::Dense: interaction = qv.dot(spec.dense * qv); break;
  }
  double e = interaction + qv.dot(spec.V);
  if (spec.has_entropy) e -= spec.beta * entropy(q);
  return e;
}

enum class EnergyMethod { KlDro, Chi2Dro, MmdDro, Gdro, Gcdro };

inline EnergyMethod parse_energy_method(std::string_view name) {
  if (name == "KL-DRO") return EnergyMethod::KlDro;
  if (name == "chi2-DRO" || name == "Chi2-DRO" || name == "χ²-DRO") return EnergyMethod::Chi2Dro;
  if (name == "MMD-DRO") return EnergyMethod::MmdDro;
  if (name == "GDRO") return EnergyMethod::Gdro;
  if (name == "GCDRO") return EnergyMethod::Gcdro;
  fail(ErrorKind::InvalidConfig, "unknown free-energy method '", name, "'");
}

struct EnergyParams {
  // KL-DRO: entropy temperature; chi2-DRO: K = lambda I; MMD-DRO: K = lambda * Gram.
  double lambda = 1.0;
  double alpha = 0.0;
  double beta = 1.0;
  // Covariates for the MMD Gram matrix (RBF with the graph bandwidth unless
  // mmd_bandwidth > 0).
  const Matrix* X = nullptr;
  double mmd_bandwidth = 0.0;
};

inline Matrix rbf_gram(const Matrix& X, double h) {
  require(h > 0.0, ErrorKind::InvalidConfig, "RBF bandwidth must be positive");
  const auto n = X.rows();
  Matrix K(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i; j < n; ++j) {
      const double v = std::exp(-(X.row(i) - X.row(j)).squaredNorm() / (2.0 * h * h));
      K(i, j) = v;
      K(j, i) = v;
    }
  return K;
}

inline FreeEnergySpec spec_for_method(EnergyMethod method, const LossVector& ell, const Graph& g, const EnergyParams& p) {
  const auto n = static_cast<std::size_t>(ell.size());
  require(g.n() == n, ErrorKind::DimensionMismatch, "spec_for_method: graph has ", g.n(), " nodes, losses ", n);
  FreeEnergySpec s;
  s.n = n;
  s.V = -ell;
  switch (method) {
    case EnergyMethod::KlDro:
      s.beta = p.lambda;
      s.has_entropy = true;
      break;
    case EnergyMethod::Chi2Dro:
      s.kind = InteractionKind::ScaledIdentity;
      s.identity_scale = p.lambda;
      break;
    case EnergyMethod::MmdDro: {
      require(p.X != nullptr && static_cast<std::size_t>(p.X->rows()) == n, ErrorKind::InvalidConfig,
              "MMD-DRO needs the n x d covariate matrix");
      const double h = p.mmd_bandwidth > 0.0 ? p.mmd_bandwidth : g.bandwidth();
      const Matrix gram = rbf_gram(*p.X, h);
      s.kind = InteractionKind::Dense;
      s.dense = p.lambda * gram;
      s.V = -ell - (2.0 * p.lambda / static_cast<double>(n)) * (gram.transpose() * Vector::Ones(static_cast<Eigen::Index>(n)));
      break;
    }
    case EnergyMethod::Gdro:
      s.beta = p.beta;
      s.has_entropy = true;
      break;
    case EnergyMethod::Gcdro:
      s.kind = InteractionKind::EdgeSparse;
      s.edge_values.reserve(g.num_directed_edges());
      for (const auto& e : g.edges()) {
        const double diff = ell[static_cast<Eigen::Index>(e.src)] - ell[static_cast<Eigen::Index>(e.dst)];
        s.edge_values.push_back({e.src, e.dst, 0.5 * p.alpha * e.weight * diff * diff});
      }
      s.beta = p.beta;
      s.has_entropy = true;
      break;
  }
  return s;
}

/// Negated Hessian of R in q: beta diag(1/q) + 2 K with K the calibrated
/// interaction matrix. Dense; meant for desk-scale checks.
inline Matrix negated_risk_hessian(const LossVector& ell, const WeightVector& q, const Graph& g, const RiskConfig& cfg) {
  q.require_interior();
  const FreeEnergySpec s = spec_for_method(EnergyMethod::Gcdro, ell, g, {1.0, cfg.alpha, cfg.beta, nullptr, 0.0});
  Matrix H = 2.0 * s.interaction_matrix();
  for (std::size_t i = 0; i < q.size(); ++i) H(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) += cfg.beta / q[i];
  return H;
}

}  // namespace gcdro
