// AdamW: adaptive moments with decoupled weight decay.

#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "deco/tensor.hpp"

namespace deco {

struct AdamWConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }

  // Applies one step to `param` given `grad`. Slot state is keyed by call
  // order within a step: call update() for every parameter, in a fixed
  // order, then finish_step().
  void update(Tensor<T>& param, const Tensor<T>& grad) {
    detail::require_same_shape(param, grad, "AdamW::update");
    if (slot_ == moments_.size())
      moments_.push_back({Tensor<T>(param.shape()), Tensor<T>(param.shape())});
    auto& [m, v] = moments_[slot_];
    detail::require_same_shape(param, m, "AdamW::update: parameter reordered");
    ++slot_;

    const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
    const T bias1 = T(1) - std::pow(b1, T(step_ + 1));
    const T bias2 = T(1) - std::pow(b2, T(step_ + 1));
    const T lr = T(cfg_.lr), wd = T(cfg_.weight_decay), eps = T(cfg_.eps);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const T g = grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T mhat = m[i] / bias1;
      const T vhat = v[i] / bias2;
      param[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * param[i]);
    }
  }

  void finish_step() {
    ++step_;
    slot_ = 0;
  }

  std::size_t steps() const { return step_; }

 private:
  AdamWConfig cfg_;
  std::vector<std::pair<Tensor<T>, Tensor<T>>> moments_;
  std::size_t slot_ = 0;
  std::size_t step_ = 0;
};

}  // namespace deco
