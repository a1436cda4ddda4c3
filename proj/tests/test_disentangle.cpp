#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "deco/disentangle.hpp"
#include "deco/rng.hpp"
#include "test_util.hpp"

using deco::FeatureStats;
using deco::RecombineConvention;
using deco::Shape;
using deco::Tensor;
using deco::Var;
using Catch::Approx;

namespace {

Tensor<double> map2x2(double a, double b, double c, double d) {
  return Tensor<double>(Shape{1, 1, 2, 2}, {a, b, c, d});
}

}  // namespace

TEST_CASE("spatial_stats on the worked 2x2 example") {
  auto r = map2x2(1, 3, 5, 7);
  auto s = deco::spatial_stats(r, 0.0);
  CHECK(s.mu[0] == Approx(4.0));
  CHECK(s.sigma[0] == Approx(std::sqrt(5.0)));
}

TEST_CASE("spatial_stats of a constant map") {
  Tensor<double> r(Shape{1, 2, 3, 3}, 2.75);
  auto s = deco::spatial_stats(r, 1e-5);
  CHECK(s.mu[0] == Approx(2.75));
  CHECK(s.mu[1] == Approx(2.75));
  CHECK(s.sigma[0] == Approx(std::sqrt(1e-5)));
  CHECK(s.sigma[1] == Approx(std::sqrt(1e-5)));
}

TEST_CASE("sigma is homogeneous in positive scaling") {
  deco::SeededRng rng(3);
  auto r = testutil::random_tensor(Shape{1, 1, 4, 4}, rng);
  // zero-mean the map so scaling acts on sigma alone
  auto s0 = deco::spatial_stats(r, 0.0);
  for (std::size_t i = 0; i < r.size(); ++i) r[i] -= s0.mu[0];

  auto base = deco::spatial_stats(r, 0.0);
  auto scaled = deco::spatial_stats(deco::mul(r, 3.0), 0.0);
  CHECK(scaled.sigma[0] == Approx(3.0 * base.sigma[0]));
}

TEST_CASE("instance_normalize worked example and constant map") {
  auto r = map2x2(1, 3, 5, 7);
  auto s = deco::spatial_stats(r, 0.0);
  auto z = deco::instance_normalize(r, s);
  const double root5 = std::sqrt(5.0);
  CHECK(z[0] == Approx(-3.0 / root5));
  CHECK(z[1] == Approx(-1.0 / root5));
  CHECK(z[2] == Approx(1.0 / root5));
  CHECK(z[3] == Approx(3.0 / root5));

  Tensor<double> c(Shape{2, 1, 2, 2}, 4.2);
  auto sc = deco::spatial_stats(c, 1e-5);
  auto zc = deco::instance_normalize(c, sc);
  for (std::size_t i = 0; i < zc.size(); ++i) CHECK(zc[i] == Approx(0.0));
}

TEST_CASE("semantic map invariant holds for random inputs") {
  const double eps = 1e-5;
  for (int seed = 0; seed < 20; ++seed) {
    deco::SeededRng rng(50 + seed);
    auto r = testutil::random_tensor(Shape{2, 3, 4, 4}, rng, -2.0, 2.0);
    auto s = deco::spatial_stats(r, eps);
    auto z = deco::instance_normalize(r, s);

    const std::size_t hw = 16;
    for (std::size_t nc = 0; nc < 6; ++nc) {
      double mean = 0;
      for (std::size_t j = 0; j < hw; ++j) mean += z[nc * hw + j];
      mean /= hw;
      REQUIRE(std::abs(mean) <= 1e-6);

      double var = 0;
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = z[nc * hw + j] - mean;
        var += d * d;
      }
      var /= hw;
      // raw variance of r for this channel
      double rmean = 0, rvar = 0;
      for (std::size_t j = 0; j < hw; ++j) rmean += r[nc * hw + j];
      rmean /= hw;
      for (std::size_t j = 0; j < hw; ++j) {
        const double d = r[nc * hw + j] - rmean;
        rvar += d * d;
      }
      rvar /= hw;
      REQUIRE(std::abs(std::sqrt(var) - std::sqrt(rvar / (rvar + eps))) <=
              1e-6);
    }
  }
}

TEST_CASE("normalization is invariant to positive affine maps") {
  for (int seed = 0; seed < 20; ++seed) {
    deco::SeededRng rng(90 + seed);
    auto r = testutil::random_tensor(Shape{1, 2, 4, 4}, rng);
    const double a = rng.uniform(0.2, 3.0);
    const double b = rng.uniform(-2.0, 2.0);
    auto r2 = deco::add(deco::mul(r, a), b);

    auto z1 = deco::instance_normalize(r, deco::spatial_stats(r, 0.0));
    auto z2 = deco::instance_normalize(r2, deco::spatial_stats(r2, 0.0));
    REQUIRE(testutil::max_abs_diff(z1, z2) <= 1e-9);
  }
}

TEST_CASE("reassemble worked example") {
  const double root5 = std::sqrt(5.0);
  Tensor<double> z(Shape{1, 1, 2, 2},
                   {-3 / root5, -1 / root5, 1 / root5, 3 / root5});
  Tensor<double> mu(Shape{1, 1}, {10.0});
  Tensor<double> sigma(Shape{1, 1}, {root5});
  auto r = deco::reassemble(z, mu, sigma);
  CHECK(r[0] == Approx(7.0));
  CHECK(r[1] == Approx(9.0));
  CHECK(r[2] == Approx(11.0));
  CHECK(r[3] == Approx(13.0));

  Tensor<double> z0(Shape{1, 1, 2, 2}, 0.0);
  auto flat = deco::reassemble(z0, Tensor<double>(Shape{1, 1}, {3.0}),
                               Tensor<double>(Shape{1, 1}, {2.0}));
  for (std::size_t i = 0; i < flat.size(); ++i) CHECK(flat[i] == Approx(3.0));
}

TEST_CASE("decompose/reassemble round trip") {
  for (int seed = 0; seed < 20; ++seed) {
    deco::SeededRng rng(130 + seed);
    auto r = testutil::random_tensor(Shape{2, 2, 5, 5}, rng, -3.0, 3.0);

    auto s0 = deco::spatial_stats(r, 0.0);
    auto z0 = deco::instance_normalize(r, s0);
    REQUIRE(testutil::max_abs_diff(deco::reassemble(z0, s0.mu, s0.sigma), r) <=
            1e-9);

    auto s1 = deco::spatial_stats(r, 1e-5);
    auto z1 = deco::instance_normalize(r, s1);
    REQUIRE(testutil::max_abs_diff(deco::reassemble(z1, s1.mu, s1.sigma), r) <=
            1e-4);
  }
}

TEST_CASE("recombine identities") {
  deco::SeededRng rng(7);
  auto r = testutil::random_tensor(Shape{1, 2, 4, 4}, rng);
  auto self = deco::recombine(r, r, RecombineConvention::kSwapBoth, 0.0);
  CHECK(testutil::max_abs_diff(self, r) <= 1e-9);

  // constant receiver takes the donor's mean exactly
  Tensor<double> flat(Shape{1, 1, 2, 2}, 5.0);
  Tensor<double> donor(Shape{1, 1, 2, 2}, {1.0, 2.0, 2.0, 3.0});
  auto out =
      deco::recombine(flat, donor, RecombineConvention::kSwapBoth, 1e-5);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == Approx(2.0));
}

TEST_CASE("recombine worked example, both conventions") {
  auto ri = map2x2(1, 3, 5, 7);
  auto rj = map2x2(0, 0, 0, 20);
  // donor stats: mu = 5, var = (25*3 + 225)/4 = 75
  auto sj = deco::spatial_stats(rj, 0.0);
  CHECK(sj.mu[0] == Approx(5.0));
  CHECK(sj.sigma[0] == Approx(std::sqrt(75.0)));

  auto swap = deco::recombine(ri, rj, RecombineConvention::kSwapBoth, 0.0);
  const double root5 = std::sqrt(5.0), root75 = std::sqrt(75.0);
  CHECK(swap[0] == Approx(5.0 + root75 * (-3.0 / root5)));
  CHECK(swap[3] == Approx(5.0 + root75 * (3.0 / root5)));

  // eq3-literal keeps the receiver's sigma
  auto lit = deco::recombine(ri, rj, RecombineConvention::kEq3Literal, 0.0);
  CHECK(lit[0] == Approx(5.0 - 3.0));  // (r - mu_i) + mu_j
  CHECK(lit[3] == Approx(5.0 + 3.0));

  CHECK_THROWS_AS(
      deco::recombine(ri, Tensor<double>(Shape{1, 1, 3, 3}, 1.0),
                      RecombineConvention::kSwapBoth, 0.0),
      std::invalid_argument);
}

TEST_CASE("statistic transplant") {
  for (int seed = 0; seed < 20; ++seed) {
    deco::SeededRng rng(200 + seed);
    auto ri = testutil::random_tensor(Shape{2, 3, 4, 4}, rng, -2.0, 2.0);
    auto rj = testutil::random_tensor(Shape{2, 3, 4, 4}, rng, -1.0, 4.0);
    auto out = deco::recombine(ri, rj, RecombineConvention::kSwapBoth, 0.0);
    auto sj = deco::spatial_stats(rj, 0.0);
    auto so = deco::spatial_stats(out, 0.0);
    REQUIRE(testutil::max_abs_diff(so.mu, sj.mu) <= 1e-6);
    REQUIRE(testutil::max_abs_diff(so.sigma, sj.sigma) <= 1e-6);
  }
}

TEST_CASE("disentangle ops pass grad_check") {
  using Vs = std::vector<Var<double>>;
  for (int seed = 0; seed < 20; ++seed) {
    deco::SeededRng rng(300 + seed);
    auto ri = testutil::random_tensor(Shape{2, 2, 3, 3}, rng, -2.0, 2.0);
    auto rj = testutil::random_tensor(Shape{2, 2, 3, 3}, rng, -2.0, 2.0);

    auto f_norm = [](const Vs& v) {
      auto s = deco::spatial_stats(v[0], 1e-3);
      auto z = deco::instance_normalize(v[0], s);
      return deco::sum_all(deco::mul(z, z));
    };
    REQUIRE(deco::grad_check(f_norm, {ri}).max_rel_err < 1e-4);

    auto f_recombine = [](const Vs& v) {
      auto out =
          deco::recombine(v[0], v[1], RecombineConvention::kSwapBoth, 1e-3);
      return deco::sum_all(deco::mul(out, out));
    };
    REQUIRE(deco::grad_check(f_recombine, {ri, rj}).max_rel_err < 1e-4);

    auto f_reassemble = [](const Vs& v) {
      auto out = deco::reassemble(v[0], v[1], v[2]);
      return deco::sum_all(deco::mul(out, out));
    };
    auto mu = testutil::random_tensor(Shape{2, 2}, rng);
    auto sigma = testutil::random_tensor(Shape{2, 2}, rng, 0.5, 2.0);
    REQUIRE(deco::grad_check(f_reassemble, {ri, mu, sigma}).max_rel_err <
            1e-4);
  }
}
