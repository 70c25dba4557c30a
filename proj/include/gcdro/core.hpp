#pragma once

// Shared numeric types, the error type and seeded generator streams.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>

namespace gcdro {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class ErrorKind {
  InvalidConfig,
  DimensionMismatch,
  Numerical,
  Io,
  MissingColumn,
  Parse,
  EmptySelection,
  NonConvergence,
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidConfig: return "invalid-config";
    case ErrorKind::DimensionMismatch: return "dimension-mismatch";
    case ErrorKind::Numerical: return "numerical-failure";
    case ErrorKind::Io: return "io";
    case ErrorKind::MissingColumn: return "missing-column";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::EmptySelection: return "empty-selection";
    case ErrorKind::NonConvergence: return "non-convergence";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

namespace detail {

inline void stringify(std::ostringstream&) {}

template <typename T, typename... Rest>
void stringify(std::ostringstream& oss, T&& first, Rest&&... rest) {
  oss << std::forward<T>(first);
  stringify(oss, std::forward<Rest>(rest)...);
}

}  // namespace detail

template <typename... Args>
[[noreturn]] void fail(ErrorKind kind, Args&&... args) {
  std::ostringstream oss;
  oss.precision(17);
  detail::stringify(oss, std::forward<Args>(args)...);
  throw Error(kind, oss.str());
}

template <typename... Args>
void require(bool cond, ErrorKind kind, Args&&... args) {
  if (!cond) fail(kind, std::forward<Args>(args)...);
}

// Bit-reproducible generator streams: one 64-bit seed, independent streams by id.
using Rng = std::mt19937_64;
inline constexpr const char* kRngName = "mt19937_64(seed_seq{seed_lo,seed_hi,stream})";

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(seq);
}

inline bool all_finite(std::span<const double> xs) {
  for (double x : xs)
    if (!std::isfinite(x)) return false;
  return true;
}

inline std::span<const double> as_span(const Vector& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

// FNV-1a, used for config hashes in run manifests.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace gcdro
