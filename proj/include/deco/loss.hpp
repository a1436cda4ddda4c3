// Training objective: image-level cross-entropy on the augmented path plus
// the pixel-level semantic alignment term, weighted by a scheduled alpha.
//
// Alignment anchors are the augmented samples; the positive for anchor i is
// its own original, and the denominator runs over the 2M pool (M originals
// then M augmented) minus the anchor itself.

#pragma once

#include <cstddef>
#include <stdexcept>
#include <vector>

#include "deco/autodiff.hpp"
#include "deco/tensor.hpp"

namespace deco {

enum class AlphaSchedule { kConstantAfterWarmStart, kLinearRamp };

struct LossConfig {
  double tau = 0.1;
  double alpha_max = 1.0;
  AlphaSchedule schedule = AlphaSchedule::kLinearRamp;
  std::size_t ramp_epochs = 10;
  std::size_t warm_start_epochs = 0;
  bool normalize_features = true;  // L2-normalize semantic vectors first
};

// Alignment weight for a 1-based epoch index. Zero through the warm start,
// then either constant or a linear ramp over ramp_epochs.
inline double alpha_at(std::size_t epoch, const LossConfig& cfg) {
  if (epoch <= cfg.warm_start_epochs) return 0.0;
  if (cfg.schedule == AlphaSchedule::kConstantAfterWarmStart)
    return cfg.alpha_max;
  const double t = double(epoch - cfg.warm_start_epochs) /
                   double(cfg.ramp_epochs == 0 ? 1 : cfg.ramp_epochs);
  return cfg.alpha_max * (t < 1.0 ? t : 1.0);
}

template <typename T>
Var<T> cross_entropy(const Var<T>& logits,
                     const std::vector<std::size_t>& labels) {
  return softmax_cross_entropy(logits, labels);
}

template <typename T>
T cross_entropy(const Tensor<T>& logits,
                const std::vector<std::size_t>& labels) {
  return softmax_cross_entropy(Var<T>::constant(logits), labels)
      .value()
      .item();
}

// z_aug, z_orig: M x F flattened semantic features of the augmented and
// original paths (same sample order). Returns the mean over anchors.
template <typename T>
Var<T> semantic_alignment(const Var<T>& z_aug, const Var<T>& z_orig, T tau,
                          bool normalize = true) {
  detail::require(tau > T(0), "semantic_alignment: tau must be positive");
  detail::require(z_aug.value().rank() == 2 && z_orig.value().rank() == 2,
                  "semantic_alignment: expected MxF feature matrices");
  detail::require_same_shape(z_aug.value(), z_orig.value(),
                             "semantic_alignment");
  const std::size_t m = z_aug.value().dim(0);

  Var<T> aug = normalize ? row_l2_normalize(z_aug) : z_aug;
  Var<T> orig = normalize ? row_l2_normalize(z_orig) : z_orig;

  // pool rows: 0..M-1 originals, M..2M-1 augmented
  Var<T> pool = concat_rows(orig, aug);
  Var<T> sims = mul(pairwise_dot(aug, pool), T(1) / tau);

  std::vector<std::size_t> positive(m), self(m);
  for (std::size_t i = 0; i < m; ++i) {
    positive[i] = i;
    self[i] = m + i;
  }
  Var<T> pos = gather_cols(sims, positive);
  Var<T> lse = logsumexp_excluding(sims, self);
  return mean_all(sub(lse, pos));
}

template <typename T>
T semantic_alignment(const Tensor<T>& z_aug, const Tensor<T>& z_orig, T tau,
                     bool normalize = true) {
  return semantic_alignment(Var<T>::constant(z_aug), Var<T>::constant(z_orig),
                            tau, normalize)
      .value()
      .item();
}

// L_total = CE(logits_aug, labels) + alpha(epoch) * alignment.
template <typename T>
Var<T> total_loss(const Var<T>& logits_aug,
                  const std::vector<std::size_t>& labels, const Var<T>& z_aug,
                  const Var<T>& z_orig, std::size_t epoch,
                  const LossConfig& cfg) {
  Var<T> ce = cross_entropy(logits_aug, labels);
  const double a = alpha_at(epoch, cfg);
  if (a == 0.0) return ce;
  Var<T> align =
      semantic_alignment(z_aug, z_orig, T(cfg.tau), cfg.normalize_features);
  return add(ce, mul(align, T(a)));
}

}  // namespace deco
