// Small from-scratch conv backbone with a designated insertion layer for the
// feature-space augmentation, plus the pool + linear classifier head.

#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "deco/autodiff.hpp"
#include "deco/rng.hpp"
#include "deco/tensor.hpp"

namespace deco {

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::vector<std::size_t> stage_widths = {16, 32, 64};
  std::vector<std::size_t> stage_strides = {2, 2, 1};
  std::size_t blocks_per_stage = 1;
  std::size_t kernel = 3;
  std::size_t insertion_layer = 1;  // feature tap sits after this many blocks
  std::size_t classes = 5;

  std::size_t depth() const { return stage_widths.size() * blocks_per_stage; }
  std::size_t pad() const { return kernel / 2; }

  void validate() const {
    detail::require(!stage_widths.empty(), "backbone: no stages");
    detail::require(stage_strides.size() == stage_widths.size(),
                    "backbone: one stride per stage");
    detail::require(blocks_per_stage >= 1, "backbone: blocks_per_stage >= 1");
    detail::require(insertion_layer >= 1 && insertion_layer < depth(),
                    "backbone: insertion layer must satisfy 1 <= l < depth");
    detail::require(classes >= 2, "backbone: need at least two classes");
  }

  // (channels, stride) of conv block `i` (0-based).
  std::pair<std::size_t, std::size_t> block_spec(std::size_t i) const {
    const std::size_t stage = i / blocks_per_stage;
    const bool first = i % blocks_per_stage == 0;
    return {stage_widths[stage], first ? stage_strides[stage] : 1};
  }

  std::size_t block_in_channels(std::size_t i) const {
    return i == 0 ? in_channels : block_spec(i - 1).first;
  }

  // Feature-map shape after `layers` blocks on an H x W input.
  Shape feature_shape(std::size_t layers, std::size_t h, std::size_t w) const {
    std::size_t ch = in_channels;
    for (std::size_t i = 0; i < layers; ++i) {
      auto [c, s] = block_spec(i);
      ch = c;
      h = (h + 2 * pad() - kernel) / s + 1;
      w = (w + 2 * pad() - kernel) / s + 1;
    }
    return Shape{ch, h, w};
  }
};

template <typename T>
struct Parameters {
  std::vector<Tensor<T>> conv;  // one OIKK kernel per block
  Tensor<T> fc_weight;          // F x classes
  Tensor<T> fc_bias;            // classes

  bool all_finite() const {
    for (const auto& k : conv)
      if (!k.all_finite()) return false;
    return fc_weight.all_finite() && fc_bias.all_finite();
  }

  void for_each(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    for (std::size_t i = 0; i < conv.size(); ++i)
      fn("conv" + std::to_string(i) + ".weight", conv[i]);
    fn("fc.weight", fc_weight);
    fn("fc.bias", fc_bias);
  }
};

// Graph handles over a parameter snapshot.
template <typename T>
struct ParamVars {
  std::vector<Var<T>> conv;
  Var<T> fc_weight;
  Var<T> fc_bias;
};

template <typename T>
ParamVars<T> lift_parameters(const Parameters<T>& p, bool requires_grad) {
  ParamVars<T> v;
  v.conv.reserve(p.conv.size());
  for (const auto& k : p.conv)
    v.conv.push_back(requires_grad ? Var<T>::param(k) : Var<T>::constant(k));
  v.fc_weight =
      requires_grad ? Var<T>::param(p.fc_weight) : Var<T>::constant(p.fc_weight);
  v.fc_bias =
      requires_grad ? Var<T>::param(p.fc_bias) : Var<T>::constant(p.fc_bias);
  return v;
}

// Kaiming-style init: conv and fc weights ~ N(0, 2/fan_in), biases zero.
template <typename T>
Parameters<T> init_parameters(const BackboneConfig& cfg, SeededRng& rng) {
  cfg.validate();
  Parameters<T> p;
  for (std::size_t i = 0; i < cfg.depth(); ++i) {
    const std::size_t cin = cfg.block_in_channels(i);
    auto [cout, stride] = cfg.block_spec(i);
    (void)stride;
    Tensor<T> k(Shape{cout, cin, cfg.kernel, cfg.kernel});
    const double std_dev = std::sqrt(2.0 / double(cin * cfg.kernel * cfg.kernel));
    for (std::size_t j = 0; j < k.size(); ++j)
      k[j] = T(rng.normal() * std_dev);
    p.conv.push_back(std::move(k));
  }
  const std::size_t feat = cfg.stage_widths.back();
  p.fc_weight = Tensor<T>(Shape{feat, cfg.classes});
  const double std_fc = std::sqrt(2.0 / double(feat));
  for (std::size_t j = 0; j < p.fc_weight.size(); ++j)
    p.fc_weight[j] = T(rng.normal() * std_fc);
  p.fc_bias = Tensor<T>(Shape{cfg.classes});
  return p;
}

namespace modeldetail {

template <typename T>
Var<T> run_blocks(Var<T> x, const ParamVars<T>& params,
                  const BackboneConfig& cfg, std::size_t from, std::size_t to) {
  for (std::size_t i = from; i < to; ++i) {
    auto [cout, stride] = cfg.block_spec(i);
    (void)cout;
    x = relu(conv2d(x, params.conv[i], stride, cfg.pad()));
  }
  return x;
}

}  // namespace modeldetail

// Input N x 3 x H x W up to the insertion layer l.
template <typename T>
Var<T> forward_to_layer(const Var<T>& x, const ParamVars<T>& params,
                        const BackboneConfig& cfg) {
  detail::require(x.value().rank() == 4 &&
                      x.value().dim(1) == cfg.in_channels,
                  "forward_to_layer: input must be N x " +
                      std::to_string(cfg.in_channels) + " x H x W");
  return modeldetail::run_blocks(x, params, cfg, 0, cfg.insertion_layer);
}

// Layer-l features (original or augmented) through the remaining blocks.
template <typename T>
Var<T> forward_from_layer(const Var<T>& r, const ParamVars<T>& params,
                          const BackboneConfig& cfg) {
  return modeldetail::run_blocks(r, params, cfg, cfg.insertion_layer,
                                 cfg.depth());
}

template <typename T>
Var<T> classify(const Var<T>& features_l, const ParamVars<T>& params,
                const BackboneConfig& cfg) {
  (void)cfg;
  auto pooled = global_avg_pool(features_l);
  return linear(pooled, params.fc_weight, params.fc_bias);
}

template <typename T>
Var<T> forward_full(const Var<T>& x, const ParamVars<T>& params,
                    const BackboneConfig& cfg) {
  return forward_from_layer(forward_to_layer(x, params, cfg), params, cfg);
}

}  // namespace deco
