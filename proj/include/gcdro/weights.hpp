#pragma once

#include "gcdro/core.hpp"

namespace gcdro {

/// Probability vector over the training samples.
///
/// Construction checks nonnegativity and unit mass (within `tol`). Operations
/// that take logarithms additionally call require_interior(); the only
/// boundary weights the library produces are DORO's dropped samples.
class WeightVector {
 public:
  WeightVector() = default;

  explicit WeightVector(Vector q, double tol = 1e-10) : q_(std::move(q)) {
    require(q_.size() > 0, ErrorKind::InvalidConfig, "weight vector is empty");
    require(q_.allFinite(), ErrorKind::Numerical, "weight vector has non-finite entries");
    require(q_.minCoeff() >= 0.0, ErrorKind::InvalidConfig, "weight vector has a negative entry ", q_.minCoeff());
    const double s = q_.sum();
    require(std::abs(s - 1.0) <= tol, ErrorKind::InvalidConfig, "weights sum to ", s, ", not 1");
  }

  static WeightVector uniform(std::size_t n) {
    return WeightVector(Vector::Constant(static_cast<Eigen::Index>(n), 1.0 / static_cast<double>(n)));
  }

  // Skips validation; for internal flow iterates whose invariants are
  // maintained structurally.
  static WeightVector trusted(Vector q) {
    WeightVector w;
    w.q_ = std::move(q);
    return w;
  }

  std::size_t size() const { return static_cast<std::size_t>(q_.size()); }
  double operator[](std::size_t i) const { return q_[static_cast<Eigen::Index>(i)]; }
  const Vector& values() const { return q_; }
  bool interior() const { return q_.size() > 0 && q_.minCoeff() > 0.0; }

  void require_interior() const {
    require(interior(), ErrorKind::InvalidConfig, "weight vector must be strictly positive (min ",
            q_.size() ? q_.minCoeff() : 0.0, ")");
  }

 private:
  Vector q_;
};

}  // namespace gcdro
