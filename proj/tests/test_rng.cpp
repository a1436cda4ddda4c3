#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>

#include "deco/rng.hpp"

using deco::SeededRng;
using Catch::Approx;

// Reference outputs computed with an independent implementation of
// splitmix64 + xoshiro256++ (documented in rng.hpp).
TEST_CASE("xoshiro256++ matches reference vectors") {
  {
    SeededRng r(0);
    CHECK(r.next_u64() == 0x53175d61490b23dfULL);
    CHECK(r.next_u64() == 0x61da6f3dc380d507ULL);
    CHECK(r.next_u64() == 0x5c0fdf91ec9a7bfcULL);
    CHECK(r.next_u64() == 0x02eebf8c3bbe5e1aULL);
    CHECK(r.next_u64() == 0x7eca04ebaf4a5eeaULL);
  }
  {
    SeededRng r(42);
    CHECK(r.next_u64() == 0xd0764d4f4476689fULL);
    CHECK(r.next_u64() == 0x519e4174576f3791ULL);
    CHECK(r.next_u64() == 0xfbe07cfb0c24ed8cULL);
    CHECK(r.next_u64() == 0xb37d9f600cd835b8ULL);
    CHECK(r.next_u64() == 0xcb231c3874846a73ULL);
  }
  {
    SeededRng r(0xDEADBEEFULL);
    CHECK(r.next_u64() == 0x0c520eb8fea98edeULL);
    CHECK(r.next_u64() == 0x2b74a6338b80e0e2ULL);
    CHECK(r.next_u64() == 0xbe238770c3795322ULL);
  }
}

TEST_CASE("uniform doubles match reference and stay in [0,1)") {
  SeededRng r(42);
  CHECK(r.uniform() == 0.8143051451229099);
  CHECK(r.uniform() == 0.3188210400616611);
  CHECK(r.uniform() == 0.9838941681774888);
  CHECK(r.uniform() == 0.7011355981347556);

  SeededRng s(9);
  double mean = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = s.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    mean += u;
  }
  mean /= n;
  CHECK(mean == Approx(0.5).margin(0.005));
}

TEST_CASE("identical seeds give identical sequences") {
  SeededRng a(123456), b(123456);
  for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());

  SeededRng c(1), d(2);
  bool any_diff = false;
  for (int i = 0; i < 16; ++i) any_diff |= (c.next_u64() != d.next_u64());
  CHECK(any_diff);
}

TEST_CASE("normal draws have the right first two moments") {
  SeededRng r(31);
  const int n = 100000;
  double sum = 0, sumsq = 0;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sumsq += x * x;
  }
  const double mean = sum / n;
  const double var = sumsq / n - mean * mean;
  CHECK(mean == Approx(0.0).margin(0.02));
  CHECK(var == Approx(1.0).margin(0.02));
}

TEST_CASE("gamma sampler moments") {
  // Gamma(shape, 1) has mean = shape, variance = shape.
  for (double shape : {0.4, 0.5, 1.0, 2.5}) {
    SeededRng r(std::uint64_t(shape * 1000));
    const int n = 100000;
    double sum = 0, sumsq = 0;
    for (int i = 0; i < n; ++i) {
      const double x = r.gamma(shape);
      REQUIRE(x >= 0.0);
      sum += x;
      sumsq += x * x;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    CHECK(mean == Approx(shape).margin(0.03 * std::max(1.0, shape)));
    CHECK(var == Approx(shape).margin(0.06 * std::max(1.0, shape)));
  }
  CHECK_THROWS_AS(SeededRng(1).gamma(0.0), std::invalid_argument);
  CHECK_THROWS_AS(SeededRng(1).gamma(-1.0), std::invalid_argument);
}

TEST_CASE("beta support") {
  SeededRng r(8);
  for (int i = 0; i < 200000; ++i) {
    const double x = r.beta(0.5, 0.5);
    REQUIRE(x >= 0.0);
    REQUIRE(x <= 1.0);
  }
}

TEST_CASE("forked streams are decorrelated and deterministic") {
  SeededRng base(10);
  SeededRng f1 = base.fork(0);
  SeededRng f2 = base.fork(1);
  SeededRng f1_again = SeededRng(10).fork(0);
  CHECK(f1.next_u64() != f2.next_u64());
  SeededRng f1b = base.fork(0);
  CHECK(f1b.next_u64() == f1_again.next_u64());
}
