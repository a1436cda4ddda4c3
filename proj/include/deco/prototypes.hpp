// Prototype banks and prototype-enhanced synthesis: class/domain prototype
// maintenance, data-aware interpolation weights, Beta-sampled coefficients,
// and the recombination of enhanced semantics with enhanced donor statistics.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deco/autodiff.hpp"
#include "deco/disentangle.hpp"
#include "deco/rng.hpp"
#include "deco/tensor.hpp"

namespace deco {

// n[d][c] = number of training examples of class c in domain d.
struct CountMatrix {
  std::vector<std::vector<std::uint64_t>> n;

  CountMatrix() = default;
  CountMatrix(std::size_t domains, std::size_t classes)
      : n(domains, std::vector<std::uint64_t>(classes, 0)) {}

  std::size_t domains() const { return n.size(); }
  std::size_t classes() const { return n.empty() ? 0 : n[0].size(); }

  std::uint64_t class_total(std::size_t c) const {
    std::uint64_t t = 0;
    for (const auto& row : n) t += row.at(c);
    return t;
  }
  std::uint64_t domain_total(std::size_t d) const {
    std::uint64_t t = 0;
    for (std::uint64_t v : n.at(d)) t += v;
    return t;
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (std::size_t d = 0; d < domains(); ++d) t += domain_total(d);
    return t;
  }
};

enum class WeightNorm { kMeanOne, kRaw };

struct WeightConfig {
  double gamma_c = 0.2;
  double gamma_d = 0.2;
  WeightNorm norm = WeightNorm::kMeanOne;
  bool clamp = true;  // clamp lambda*w into [0,1] before interpolating
};

// w_c = [sum_c' sum_k n(k,c')^g] / [sum_k n(k,c)^g], optionally divided by C.
// Note pow(0, 0) == 1, which is exactly the flattening the g = 0 case wants.
inline double class_weight(std::size_t c, const CountMatrix& counts,
                           const WeightConfig& cfg) {
  if (counts.class_total(c) == 0)
    throw std::invalid_argument("class_weight: class " + std::to_string(c) +
                                " has zero total count");
  double denom = 0, numer = 0;
  for (std::size_t cc = 0; cc < counts.classes(); ++cc) {
    double t = 0;
    for (std::size_t d = 0; d < counts.domains(); ++d)
      t += std::pow(double(counts.n[d][cc]), cfg.gamma_c);
    numer += t;
    if (cc == c) denom = t;
  }
  double w = numer / denom;
  if (cfg.norm == WeightNorm::kMeanOne) w /= double(counts.classes());
  return w;
}

inline double domain_weight(std::size_t d, const CountMatrix& counts,
                            const WeightConfig& cfg) {
  if (counts.domain_total(d) == 0)
    throw std::invalid_argument("domain_weight: domain " + std::to_string(d) +
                                " has zero total count");
  double denom = 0, numer = 0;
  for (std::size_t dd = 0; dd < counts.domains(); ++dd) {
    double t = 0;
    for (std::size_t c = 0; c < counts.classes(); ++c)
      t += std::pow(double(counts.n[dd][c]), cfg.gamma_d);
    numer += t;
    if (dd == d) denom = t;
  }
  double w = numer / denom;
  if (cfg.norm == WeightNorm::kMeanOne) w /= double(counts.domains());
  return w;
}

// ---------------------------------------------------------------------------
// Running means. Exact mode keeps a running sum and count and reproduces the
// brute-force dataset average; ema mode tracks the moving batch-mean.
// ---------------------------------------------------------------------------

enum class BankMode { kExact, kEma };

template <typename T>
class RunningBank {
 public:
  RunningBank() = default;
  RunningBank(std::size_t slots, Shape item_shape, BankMode mode, T momentum)
      : shape_(std::move(item_shape)),
        mode_(mode),
        momentum_(momentum),
        slots_(slots) {
    for (auto& s : slots_) {
      s.value = Tensor<T>(shape_);
      s.count = 0;
      s.init = false;
    }
  }

  std::size_t item_size() const { return shape_numel(shape_); }
  std::size_t slots() const { return slots_.size(); }
  const Shape& item_shape() const { return shape_; }
  BankMode mode() const { return mode_; }

  bool initialized(std::size_t id) const { return slots_.at(id).init; }
  std::uint64_t count(std::size_t id) const { return slots_.at(id).count; }

  // One batch-group of instances for slot `id`.
  void observe_group(std::size_t id, const std::vector<const T*>& rows) {
    if (rows.empty()) return;
    Slot& s = slots_.at(id);
    const std::size_t len = item_size();
    if (mode_ == BankMode::kExact) {
      for (const T* r : rows) {
        for (std::size_t j = 0; j < len; ++j) s.value[j] += r[j];
      }
      s.count += rows.size();
      s.init = true;
    } else {
      Tensor<T> gmean(shape_);
      for (const T* r : rows)
        for (std::size_t j = 0; j < len; ++j) gmean[j] += r[j];
      const T inv = T(1) / T(rows.size());
      for (std::size_t j = 0; j < len; ++j) gmean[j] *= inv;
      if (!s.init) {
        s.value = std::move(gmean);
        s.init = true;
      } else {
        for (std::size_t j = 0; j < len; ++j)
          s.value[j] = momentum_ * s.value[j] + (T(1) - momentum_) * gmean[j];
      }
      s.count += rows.size();
    }
  }

  Tensor<T> mean(std::size_t id) const {
    const Slot& s = slots_.at(id);
    if (!s.init)
      throw std::logic_error("RunningBank: slot " + std::to_string(id) +
                             " not initialized");
    if (mode_ == BankMode::kEma) return s.value;
    Tensor<T> out = s.value;
    const T inv = T(1) / T(s.count);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] *= inv;
    return out;
  }

  // Restore one slot from a serialized mean/count pair.
  void restore(std::size_t id, const Tensor<T>& mean_value,
               std::uint64_t count) {
    Slot& s = slots_.at(id);
    detail::require(mean_value.shape() == shape_,
                    "RunningBank::restore: shape mismatch");
    s.init = true;
    s.count = count;
    if (mode_ == BankMode::kEma || count == 0) {
      s.value = mean_value;
    } else {
      s.value = mean_value;
      for (std::size_t j = 0; j < s.value.size(); ++j) s.value[j] *= T(count);
    }
  }

 private:
  struct Slot {
    Tensor<T> value;  // exact: running sum; ema: current mean
    std::uint64_t count = 0;
    bool init = false;
  };

  Shape shape_;
  BankMode mode_ = BankMode::kExact;
  T momentum_ = T(0.9);
  std::vector<Slot> slots_;
};

// Class prototypes p_c: mean semantic map per class, feature-map shaped.
template <typename T>
struct ClassPrototypeBank {
  RunningBank<T> p;

  ClassPrototypeBank() = default;
  ClassPrototypeBank(std::size_t classes, Shape map_shape, BankMode mode,
                     T momentum = T(0.9))
      : p(classes, std::move(map_shape), mode, momentum) {}

  // z: N x C x H x W semantic maps, one label per sample.
  void update(const Tensor<T>& z, const std::vector<std::size_t>& labels) {
    detail::require(z.rank() == 4, "ClassPrototypeBank: z must be NCHW");
    detail::require(z.dim(0) == labels.size(),
                    "ClassPrototypeBank: one label per sample");
    const std::size_t rowsz = z.size() / z.dim(0);
    detail::require(rowsz == p.item_size(),
                    "ClassPrototypeBank: map shape mismatch");
    std::vector<std::vector<const T*>> groups(p.slots());
    for (std::size_t i = 0; i < labels.size(); ++i)
      groups.at(labels[i]).push_back(z.data() + i * rowsz);
    for (std::size_t c = 0; c < groups.size(); ++c)
      p.observe_group(c, groups[c]);
  }

  bool initialized(std::size_t c) const { return p.initialized(c); }
  Tensor<T> prototype(std::size_t c) const { return p.mean(c); }
};

// Domain prototypes (u_d, v_d): mean per-channel statistics per domain.
template <typename T>
struct DomainPrototypeBank {
  RunningBank<T> u;  // means of mu
  RunningBank<T> v;  // means of sigma

  DomainPrototypeBank() = default;
  DomainPrototypeBank(std::size_t domains, std::size_t channels, BankMode mode,
                      T momentum = T(0.9))
      : u(domains, Shape{channels}, mode, momentum),
        v(domains, Shape{channels}, mode, momentum) {}

  // mu, sigma: N x C per-sample statistics, one domain id per sample.
  void update(const Tensor<T>& mu, const Tensor<T>& sigma,
              const std::vector<std::size_t>& domains) {
    detail::require_same_shape(mu, sigma, "DomainPrototypeBank");
    detail::require(mu.rank() == 2 && mu.dim(0) == domains.size(),
                    "DomainPrototypeBank: expected NxC stats");
    detail::require(mu.dim(1) == u.item_size(),
                    "DomainPrototypeBank: channel count mismatch");
    const std::size_t c = mu.dim(1);
    std::vector<std::vector<const T*>> gu(u.slots()), gv(v.slots());
    for (std::size_t i = 0; i < domains.size(); ++i) {
      gu.at(domains[i]).push_back(mu.data() + i * c);
      gv.at(domains[i]).push_back(sigma.data() + i * c);
    }
    for (std::size_t d = 0; d < gu.size(); ++d) {
      u.observe_group(d, gu[d]);
      v.observe_group(d, gv[d]);
    }
  }

  bool initialized(std::size_t d) const {
    return u.initialized(d) && v.initialized(d);
  }
};

// ---------------------------------------------------------------------------
// Interpolation
// ---------------------------------------------------------------------------

template <typename T>
T effective_coefficient(T lambda, T w, bool clamp_on) {
  T e = lambda * w;
  if (clamp_on) e = std::clamp(e, T(0), T(1));
  return e;
}

// z_hat = e z + (1 - e) p_c for one sample map {C,H,W}.
template <typename T>
SemanticMap<T> enhance_semantic(const SemanticMap<T>& z, std::size_t c,
                                const ClassPrototypeBank<T>& bank, T lambda_c,
                                T w_c, bool clamp_on = true) {
  if (!bank.initialized(c))
    throw std::logic_error("enhance_semantic: prototype for class " +
                           std::to_string(c) + " not initialized");
  const Tensor<T> proto = bank.prototype(c);
  detail::require_same_shape(z, proto, "enhance_semantic");
  const T e = effective_coefficient(lambda_c, w_c, clamp_on);
  Tensor<T> out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i)
    out[i] = e * z[i] + (T(1) - e) * proto[i];
  return out;
}

// (mu_hat, sigma_hat) for one sample's per-channel statistics {C}. The
// convex combination of positive sigmas keeps sigma_hat positive.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> enhance_domain_stats(
    const Tensor<T>& mu, const Tensor<T>& sigma, std::size_t d,
    const DomainPrototypeBank<T>& bank, T lambda_d, T w_d,
    bool clamp_on = true) {
  if (!bank.initialized(d))
    throw std::logic_error("enhance_domain_stats: domain " +
                           std::to_string(d) + " not initialized");
  detail::require_same_shape(mu, sigma, "enhance_domain_stats");
  const Tensor<T> ud = bank.u.mean(d);
  const Tensor<T> vd = bank.v.mean(d);
  detail::require_same_shape(mu, ud, "enhance_domain_stats");
  const T e = effective_coefficient(lambda_d, w_d, clamp_on);
  Tensor<T> mu_hat(mu.shape()), sigma_hat(sigma.shape());
  for (std::size_t i = 0; i < mu.size(); ++i) {
    mu_hat[i] = e * mu[i] + (T(1) - e) * ud[i];
    sigma_hat[i] = e * sigma[i] + (T(1) - e) * vd[i];
  }
  return {std::move(mu_hat), std::move(sigma_hat)};
}

// r_hat' = sigma_hat_j * z_hat_i + mu_hat_j; the label travels with i.
template <typename T>
Tensor<T> synthesize(const SemanticMap<T>& z_hat_i, const Tensor<T>& mu_hat_j,
                     const Tensor<T>& sigma_hat_j) {
  detail::require(z_hat_i.rank() == 3, "synthesize: expected CHW map");
  detail::require(mu_hat_j.size() == z_hat_i.dim(0) &&
                      sigma_hat_j.size() == z_hat_i.dim(0),
                  "synthesize: per-channel stats must match map channels");
  const std::size_t hw = z_hat_i.dim(1) * z_hat_i.dim(2);
  Tensor<T> out(z_hat_i.shape());
  for (std::size_t c = 0; c < z_hat_i.dim(0); ++c)
    for (std::size_t j = 0; j < hw; ++j)
      out[c * hw + j] = sigma_hat_j[c] * z_hat_i[c * hw + j] + mu_hat_j[c];
  return out;
}

// ---------------------------------------------------------------------------
// Beta-sampled interpolation coefficients
// ---------------------------------------------------------------------------

enum class LambdaKind { kClass, kDomain };

struct InterpolationSampler {
  double alpha_c;
  double alpha_d;
  SeededRng rng;

  InterpolationSampler(double ac, double ad, SeededRng r)
      : alpha_c(ac), alpha_d(ad), rng(r) {
    if (!(ac > 0.0) || !(ad > 0.0))
      throw std::invalid_argument(
          "InterpolationSampler: alpha must be positive");
  }

  // lambda ~ Beta(alpha, alpha), always in [0,1].
  double sample(LambdaKind kind) {
    const double a = kind == LambdaKind::kClass ? alpha_c : alpha_d;
    return rng.beta(a, a);
  }
};

inline double sample_lambda(InterpolationSampler& s, LambdaKind kind) {
  return s.sample(kind);
}

}  // namespace deco
