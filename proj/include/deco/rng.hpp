// Seeded random source. The generator is xoshiro256++ seeded through
// splitmix64, both implemented here rather than taken from <random> so the
// draw sequence is identical on every platform and standard library.
//
// Algorithm (test vectors in tests/test_rng.cpp):
//   splitmix64(state): state += 0x9E3779B97F4A7C15;
//     z = state; z = (z ^ z>>30) * 0xBF58476D1CE4E5B9;
//     z = (z ^ z>>27) * 0x94D049BB133111EB; return z ^ z>>31.
//   xoshiro256++ state s[0..3] = first four splitmix64 outputs of the seed.
//   next(): r = rotl(s0+s3, 23) + s0; t = s1<<17; s2^=s0; s3^=s1; s1^=s2;
//     s0^=s3; s2^=t; s3 = rotl(s3, 45); return r.
//
// Doubles are (next() >> 11) * 2^-53, i.e. uniform on [0, 1).

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <stdexcept>

namespace deco {

class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& word : s_) word = splitmix64(sm);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = std::rotl(s_[0] + s_[3], 23) + s_[0];
    const std::uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = std::rotl(s_[3], 45);
    return result;
  }

  // Uniform on [0, 1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Integer in [0, n). Rejection-free modulo is fine here: n is tiny
  // compared to 2^64, the bias is unobservable.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("SeededRng::below(0)");
    return next_u64() % n;
  }

  // Standard normal via Box-Muller. Two uniforms per draw, no cached state,
  // so the mapping from the u64 stream to draws is positionally fixed.
  double normal() {
    double u1 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;  // guard log(0)
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
  }

  // Gamma(shape, 1) by Marsaglia-Tsang. Shapes below 1 use the boost
  // G(a) = G(a+1) * U^(1/a).
  double gamma(double shape) {
    if (!(shape > 0.0))
      throw std::invalid_argument("gamma: shape must be positive");
    if (shape < 1.0) {
      const double g = gamma(shape + 1.0);
      double u = uniform();
      if (u <= 0.0) u = 0x1.0p-53;
      return g * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // Beta(a, b) = G1 / (G1 + G2) with G1 ~ Gamma(a), G2 ~ Gamma(b).
  double beta(double a, double b) {
    const double g1 = gamma(a);
    const double g2 = gamma(b);
    const double s = g1 + g2;
    if (s == 0.0) return 0.5;  // both underflowed; vanishing probability
    return g1 / s;
  }

  // Derive an independently seeded stream; `stream` tags the purpose.
  SeededRng fork(std::uint64_t stream) const {
    std::uint64_t m = seed_ + 0x9E3779B97F4A7C15ULL * (stream + 1);
    return SeededRng(splitmix64(m));
  }

  static std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t s_[4];
  std::uint64_t seed_;
};

}  // namespace deco
