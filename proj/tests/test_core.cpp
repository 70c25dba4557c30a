#include "gcdro/core.hpp"
#include "gcdro/weights.hpp"

#include <gtest/gtest.h>

using namespace gcdro;

TEST(Error, KindIsCarriedAndPrefixed) {
  try {
    fail(ErrorKind::MissingColumn, "column '", "age", "' not found");
    FAIL() << "fail() returned";
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::MissingColumn);
    EXPECT_EQ(std::string(e.what()), "missing-column: column 'age' not found");
  }
}

TEST(Error, RequirePassesThroughWhenTrue) {
  EXPECT_NO_THROW(require(true, ErrorKind::Numerical, "unused"));
  EXPECT_THROW(require(false, ErrorKind::Numerical, "x"), Error);
}

TEST(Rng, SameSeedAndStreamReproduce) {
  Rng a = make_rng(42, 3), b = make_rng(42, 3);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a(), b());
}

TEST(Rng, StreamsAndSeedsDiffer) {
  Rng a = make_rng(42, 0), b = make_rng(42, 1), c = make_rng(43, 0);
  const auto x = a(), y = b(), z = c();
  EXPECT_NE(x, y);
  EXPECT_NE(x, z);
}

TEST(Rng, HighSeedBitsMatter) {
  Rng a = make_rng(1), b = make_rng(1 + (std::uint64_t{1} << 32));
  EXPECT_NE(a(), b());
}

TEST(Fnv1a, KnownVectors) {
  // Reference values of the 64-bit FNV-1a function.
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ull);
}

TEST(AllFinite, DetectsNanAndInf) {
  Vector v = Vector::Ones(3);
  EXPECT_TRUE(all_finite(as_span(v)));
  v[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(all_finite(as_span(v)));
  v[1] = std::numeric_limits<double>::infinity();
  EXPECT_FALSE(all_finite(as_span(v)));
}

TEST(WeightVector, UniformSumsToOne) {
  const auto w = WeightVector::uniform(7);
  EXPECT_EQ(w.size(), 7u);
  EXPECT_NEAR(w.values().sum(), 1.0, 1e-15);
  EXPECT_TRUE(w.interior());
}

TEST(WeightVector, RejectsNegativeOffSimplexAndNonFinite) {
  Vector v(3);
  v << 0.5, 0.6, -0.1;
  EXPECT_THROW(WeightVector{v}, Error);
  v << 0.5, 0.6, 0.1;
  EXPECT_THROW(WeightVector{v}, Error);
  v << 0.5, std::numeric_limits<double>::quiet_NaN(), 0.5;
  EXPECT_THROW(WeightVector{v}, Error);
  EXPECT_THROW(WeightVector{Vector()}, Error);
}

TEST(WeightVector, BoundaryIsValidButNotInterior) {
  Vector v(3);
  v << 0.5, 0.5, 0.0;
  const WeightVector w(v);
  EXPECT_FALSE(w.interior());
  EXPECT_THROW(w.require_interior(), Error);
}
