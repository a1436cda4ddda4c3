// Feature disentanglement: split an NCHW feature map into instance-norm
// semantics and per-channel style statistics, and recombine them across
// instances.

#pragma once

#include <utility>

#include "deco/autodiff.hpp"
#include "deco/tensor.hpp"

namespace deco {

// The instance-normalized map; carries class-relevant content, while the
// (mu, sigma) statistics carry style/domain information.
template <typename T>
using SemanticMap = Tensor<T>;

template <typename T>
struct FeatureStats {
  Tensor<T> mu;     // NxC spatial means
  Tensor<T> sigma;  // NxC sqrt(spatial variance + eps), always > 0 for eps > 0
  T eps = 0;
};

template <typename T>
struct FeatureStatsVar {
  Var<T> mu;
  Var<T> sigma;
};

enum class RecombineConvention {
  kSwapBoth,    // sigma and mu both from the donor (the form the final
                // synthesis uses)
  kEq3Literal,  // keep own sigma, take the donor's mu
};

// -- graph forms --

template <typename T>
FeatureStatsVar<T> spatial_stats(const Var<T>& r, T eps) {
  return {spatial_mean(r), spatial_sigma(r, eps)};
}

template <typename T>
Var<T> instance_normalize(const Var<T>& r, const FeatureStatsVar<T>& s) {
  return channel_normalize(r, s.mu, s.sigma);
}

template <typename T>
Var<T> reassemble(const Var<T>& z, const Var<T>& mu, const Var<T>& sigma) {
  return channel_affine(z, sigma, mu);
}

template <typename T>
Var<T> recombine(const Var<T>& r_i, const Var<T>& r_j,
                 RecombineConvention convention, T eps) {
  detail::require_same_shape(r_i.value(), r_j.value(), "recombine");
  FeatureStatsVar<T> si = spatial_stats(r_i, eps);
  FeatureStatsVar<T> sj = spatial_stats(r_j, eps);
  Var<T> z = instance_normalize(r_i, si);
  const Var<T>& sigma =
      convention == RecombineConvention::kSwapBoth ? sj.sigma : si.sigma;
  return channel_affine(z, sigma, sj.mu);
}

// -- tensor forms (no gradient bookkeeping) --

template <typename T>
FeatureStats<T> spatial_stats(const Tensor<T>& r, T eps) {
  auto s = spatial_stats(Var<T>::constant(r), eps);
  return {s.mu.value(), s.sigma.value(), eps};
}

template <typename T>
SemanticMap<T> instance_normalize(const Tensor<T>& r,
                                  const FeatureStats<T>& s) {
  return channel_normalize(Var<T>::constant(r), Var<T>::constant(s.mu),
                           Var<T>::constant(s.sigma))
      .value();
}

template <typename T>
Tensor<T> reassemble(const SemanticMap<T>& z, const Tensor<T>& mu,
                     const Tensor<T>& sigma) {
  return channel_affine(Var<T>::constant(z), Var<T>::constant(sigma),
                        Var<T>::constant(mu))
      .value();
}

// The recombined map keeps the label of r_i.
template <typename T>
Tensor<T> recombine(const Tensor<T>& r_i, const Tensor<T>& r_j,
                    RecombineConvention convention, T eps) {
  return recombine(Var<T>::constant(r_i), Var<T>::constant(r_j), convention,
                   eps)
      .value();
}

}  // namespace deco
