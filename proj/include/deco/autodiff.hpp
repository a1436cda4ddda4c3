// Reverse-mode differentiation over the op set the pipeline needs. Nodes own
// their value; backward closures write straight into parent gradient buffers.
// The graph is a DAG built and swept by one thread; gradients at fan-in
// accumulate by addition.

#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <utility>
#include <vector>

#include "deco/tensor.hpp"

namespace deco {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool grad_init = false;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Tensor<T>&)> backprop;  // receives d(root)/d(this)

  Tensor<T>& grad_buf() {
    if (!grad_init) {
      grad = Tensor<T>(value.shape());
      grad_init = true;
    }
    return grad;
  }
};

template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr n) : n_(std::move(n)) {}

  static Var constant(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    return Var(std::move(n));
  }

  static Var param(Tensor<T> v) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(v);
    n->requires_grad = true;
    return Var(std::move(n));
  }

  const Tensor<T>& value() const { return node()->value; }
  bool requires_grad() const { return node()->requires_grad; }

  const Tensor<T>& grad() const {
    if (!node()->grad_init)
      throw std::logic_error("Var::grad: no gradient accumulated");
    return node()->grad;
  }

  bool has_grad() const { return n_ && n_->grad_init; }
  NodePtr node() const {
    if (!n_) throw std::logic_error("Var: empty handle");
    return n_;
  }

 private:
  NodePtr n_;
};

namespace graph {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
Var<T> make_op(Tensor<T> value, std::vector<NodePtr<T>> inputs,
               std::function<void(const Tensor<T>&)> backprop) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  for (const auto& p : inputs)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) {
    n->parents = std::move(inputs);
    n->backprop = std::move(backprop);
  }
  return Var<T>(std::move(n));
}

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace graph

// Reverse topological sweep from a scalar root. Leaf gradients stay on the
// leaves; calling backward twice keeps accumulating.
template <typename T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1)
    throw std::invalid_argument("backward: root must be scalar, got " +
                                shape_str(root.value().shape()));
  auto r = root.node();
  if (!r->requires_grad) return;

  // Iterative post-order DFS.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(r.get(), 0);
  seen.insert(r.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  r->grad_buf()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backprop && n->grad_init) n->backprop(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise graph ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto an = a.node(), bn = b.node();
  return graph::make_op<T>(add(an->value, bn->value), {an, bn},
                           [an, bn](const Tensor<T>& g) {
                             if (an->requires_grad)
                               graph::add_into(an->grad_buf(), g);
                             if (bn->requires_grad)
                               graph::add_into(bn->grad_buf(), g);
                           });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  auto an = a.node(), bn = b.node();
  return graph::make_op<T>(sub(an->value, bn->value), {an, bn},
                           [an, bn](const Tensor<T>& g) {
                             if (an->requires_grad)
                               graph::add_into(an->grad_buf(), g);
                             if (bn->requires_grad) {
                               Tensor<T>& gb = bn->grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 gb[i] -= g[i];
                             }
                           });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto an = a.node(), bn = b.node();
  return graph::make_op<T>(mul(an->value, bn->value), {an, bn},
                           [an, bn](const Tensor<T>& g) {
                             if (an->requires_grad) {
                               Tensor<T>& ga = an->grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 ga[i] += g[i] * bn->value[i];
                             }
                             if (bn->requires_grad) {
                               Tensor<T>& gb = bn->grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 gb[i] += g[i] * an->value[i];
                             }
                           });
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b) {
  auto an = a.node(), bn = b.node();
  return graph::make_op<T>(div(an->value, bn->value), {an, bn},
                           [an, bn](const Tensor<T>& g) {
                             if (an->requires_grad) {
                               Tensor<T>& ga = an->grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 ga[i] += g[i] / bn->value[i];
                             }
                             if (bn->requires_grad) {
                               Tensor<T>& gb = bn->grad_buf();
                               for (std::size_t i = 0; i < g.size(); ++i) {
                                 const T bv = bn->value[i];
                                 gb[i] -= g[i] * an->value[i] / (bv * bv);
                               }
                             }
                           });
}

template <typename T>
Var<T> add(const Var<T>& a, T s) {
  auto an = a.node();
  return graph::make_op<T>(add(an->value, s), {an},
                           [an](const Tensor<T>& g) {
                             graph::add_into(an->grad_buf(), g);
                           });
}

template <typename T>
Var<T> mul(const Var<T>& a, T s) {
  auto an = a.node();
  return graph::make_op<T>(mul(an->value, s), {an},
                           [an, s](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i] * s;
                           });
}

template <typename T>
Var<T> sub(const Var<T>& a, T s) {
  return add(a, -s);
}

template <typename T>
Var<T> div(const Var<T>& a, T s) {
  if (s == T(0)) throw std::domain_error("div: zero divisor");
  return mul(a, T(1) / s);
}

template <typename T>
Var<T> neg(const Var<T>& a) {
  return mul(a, T(-1));
}

template <typename T>
Var<T> relu(const Var<T>& a) {
  auto an = a.node();
  return graph::make_op<T>(relu(an->value), {an},
                           [an](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               if (an->value[i] > T(0)) ga[i] += g[i];
                           });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  auto an = a.node();
  Tensor<T> out = exp(an->value);
  Tensor<T> out_copy = out;  // lambda must not capture its own node
  return graph::make_op<T>(std::move(out), {an},
                           [an, out_copy](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i] * out_copy[i];
                           });
}

template <typename T>
Var<T> log(const Var<T>& a) {
  auto an = a.node();
  return graph::make_op<T>(log(an->value), {an},
                           [an](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i] / an->value[i];
                           });
}

template <typename T>
Var<T> operator+(const Var<T>& a, const Var<T>& b) { return add(a, b); }
template <typename T>
Var<T> operator-(const Var<T>& a, const Var<T>& b) { return sub(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, const Var<T>& b) { return mul(a, b); }
template <typename T>
Var<T> operator/(const Var<T>& a, const Var<T>& b) { return div(a, b); }
template <typename T>
Var<T> operator*(const Var<T>& a, T s) { return mul(a, s); }
template <typename T>
Var<T> operator*(T s, const Var<T>& a) { return mul(a, s); }
template <typename T>
Var<T> operator+(const Var<T>& a, T s) { return add(a, s); }

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(const Var<T>& a) {
  auto an = a.node();
  return graph::make_op<T>(Tensor<T>::scalar(reduce_sum_all(an->value)), {an},
                           [an](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             const T gv = g[0];
                             for (std::size_t i = 0; i < ga.size(); ++i)
                               ga[i] += gv;
                           });
}

template <typename T>
Var<T> mean_all(const Var<T>& a) {
  auto an = a.node();
  const T scale = T(1) / T(an->value.size());
  return graph::make_op<T>(Tensor<T>::scalar(reduce_mean_all(an->value)), {an},
                           [an, scale](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             const T gv = g[0] * scale;
                             for (std::size_t i = 0; i < ga.size(); ++i)
                               ga[i] += gv;
                           });
}

// NCHW -> NC
template <typename T>
Var<T> global_avg_pool(const Var<T>& a) {
  auto an = a.node();
  const std::size_t hw = an->value.dim(2) * an->value.dim(3);
  return graph::make_op<T>(global_avg_pool(an->value), {an},
                           [an, hw](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             const T inv = T(1) / T(hw);
                             for (std::size_t i = 0; i < g.size(); ++i) {
                               const T gv = g[i] * inv;
                               T* dst = ga.data() + i * hw;
                               for (std::size_t j = 0; j < hw; ++j)
                                 dst[j] += gv;
                             }
                           });
}

// Per-sample, per-channel mean over the spatial extent (same kernel as
// global average pooling; named separately because it carries the Eq. 2 role).
template <typename T>
Var<T> spatial_mean(const Var<T>& a) {
  return global_avg_pool(a);
}

// sigma = sqrt(spatial population variance + eps), shape NC.
// d sigma / d x = (x - mu) / (HW * sigma).
template <typename T>
Var<T> spatial_sigma(const Var<T>& a, T eps) {
  auto an = a.node();
  detail::require(an->value.rank() == 4,
                  "spatial_sigma: expected NCHW, got " +
                      shape_str(an->value.shape()));
  detail::require(eps >= T(0), "spatial_sigma: eps must be >= 0");
  const std::size_t nc = an->value.dim(0) * an->value.dim(1);
  const std::size_t hw = an->value.dim(2) * an->value.dim(3);
  Tensor<T> mu(Shape{an->value.dim(0), an->value.dim(1)});
  Tensor<T> sigma(mu.shape());
  const T* src = an->value.data();
  for (std::size_t i = 0; i < nc; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += src[i * hw + j];
    const T m = acc / T(hw);
    T var = 0;
    for (std::size_t j = 0; j < hw; ++j) {
      const T d = src[i * hw + j] - m;
      var += d * d;
    }
    mu[i] = m;
    sigma[i] = std::sqrt(var / T(hw) + eps);
  }
  Tensor<T> sigma_copy = sigma;
  return graph::make_op<T>(
      std::move(sigma), {an},
      [an, mu, sigma_copy, hw](const Tensor<T>& g) {
        Tensor<T>& ga = an->grad_buf();
        const T* src = an->value.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T coef = g[i] / (T(hw) * sigma_copy[i]);
          T* dst = ga.data() + i * hw;
          const T* x = src + i * hw;
          for (std::size_t j = 0; j < hw; ++j)
            dst[j] += coef * (x[j] - mu[i]);
        }
      });
}

// ---------------------------------------------------------------------------
// Per-channel normalize / affine (mu, sigma, scale, shift are NC; x is NCHW)
// ---------------------------------------------------------------------------

template <typename T>
Var<T> channel_normalize(const Var<T>& x, const Var<T>& mu,
                         const Var<T>& sigma) {
  auto xn = x.node(), mn = mu.node(), sn = sigma.node();
  detail::require(xn->value.rank() == 4, "channel_normalize: x must be NCHW");
  const std::size_t nc = xn->value.dim(0) * xn->value.dim(1);
  const std::size_t hw = xn->value.dim(2) * xn->value.dim(3);
  detail::require(mn->value.size() == nc && sn->value.size() == nc,
                  "channel_normalize: stats must be NxC");
  Tensor<T> out(xn->value.shape());
  for (std::size_t i = 0; i < nc; ++i) {
    const T m = mn->value[i], s = sn->value[i];
    const T* src = xn->value.data() + i * hw;
    T* dst = out.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) dst[j] = (src[j] - m) / s;
  }
  return graph::make_op<T>(
      std::move(out), {xn, mn, sn},
      [xn, mn, sn, nc, hw](const Tensor<T>& g) {
        for (std::size_t i = 0; i < nc; ++i) {
          const T m = mn->value[i], s = sn->value[i];
          const T* grow = g.data() + i * hw;
          const T* xrow = xn->value.data() + i * hw;
          if (xn->requires_grad) {
            T* dst = xn->grad_buf().data() + i * hw;
            const T inv = T(1) / s;
            for (std::size_t j = 0; j < hw; ++j) dst[j] += grow[j] * inv;
          }
          if (mn->requires_grad || sn->requires_grad) {
            T gsum = 0, gzsum = 0;
            for (std::size_t j = 0; j < hw; ++j) {
              gsum += grow[j];
              gzsum += grow[j] * (xrow[j] - m);
            }
            if (mn->requires_grad) mn->grad_buf()[i] -= gsum / s;
            if (sn->requires_grad) sn->grad_buf()[i] -= gzsum / (s * s);
          }
        }
      });
}

template <typename T>
Var<T> channel_affine(const Var<T>& z, const Var<T>& scale,
                      const Var<T>& shift) {
  auto zn = z.node(), an = scale.node(), bn = shift.node();
  detail::require(zn->value.rank() == 4, "channel_affine: z must be NCHW");
  const std::size_t nc = zn->value.dim(0) * zn->value.dim(1);
  const std::size_t hw = zn->value.dim(2) * zn->value.dim(3);
  detail::require(an->value.size() == nc && bn->value.size() == nc,
                  "channel_affine: stats must be NxC");
  Tensor<T> out(zn->value.shape());
  for (std::size_t i = 0; i < nc; ++i) {
    const T a = an->value[i], b = bn->value[i];
    const T* src = zn->value.data() + i * hw;
    T* dst = out.data() + i * hw;
    for (std::size_t j = 0; j < hw; ++j) dst[j] = a * src[j] + b;
  }
  return graph::make_op<T>(
      std::move(out), {zn, an, bn},
      [zn, an, bn, nc, hw](const Tensor<T>& g) {
        for (std::size_t i = 0; i < nc; ++i) {
          const T a = an->value[i];
          const T* grow = g.data() + i * hw;
          const T* zrow = zn->value.data() + i * hw;
          if (zn->requires_grad) {
            T* dst = zn->grad_buf().data() + i * hw;
            for (std::size_t j = 0; j < hw; ++j) dst[j] += grow[j] * a;
          }
          if (an->requires_grad) {
            T acc = 0;
            for (std::size_t j = 0; j < hw; ++j) acc += grow[j] * zrow[j];
            an->grad_buf()[i] += acc;
          }
          if (bn->requires_grad) {
            T acc = 0;
            for (std::size_t j = 0; j < hw; ++j) acc += grow[j];
            bn->grad_buf()[i] += acc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// conv2d / linear
// ---------------------------------------------------------------------------

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& k, std::size_t stride,
              std::size_t pad) {
  auto xn = x.node(), kn = k.node();
  return graph::make_op<T>(
      conv2d(xn->value, kn->value, stride, pad), {xn, kn},
      [xn, kn, stride, pad](const Tensor<T>& g) {
        Tensor<T>* dx = xn->requires_grad ? &xn->grad_buf() : nullptr;
        Tensor<T>* dk = kn->requires_grad ? &kn->grad_buf() : nullptr;
        conv2d_backward(xn->value, kn->value, g, stride, pad, dx, dk);
      });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  auto xn = x.node(), wn = w.node(), bn = b.node();
  return graph::make_op<T>(
      linear(xn->value, wn->value, bn->value), {xn, wn, bn},
      [xn, wn, bn](const Tensor<T>& g) {
        const std::size_t n = xn->value.dim(0), f = xn->value.dim(1),
                          k = wn->value.dim(1);
        if (xn->requires_grad) {  // dx = g . W^T
          Tensor<T>& gx = xn->grad_buf();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const T gv = g[i * k + j];
              for (std::size_t p = 0; p < f; ++p)
                gx[i * f + p] += gv * wn->value[p * k + j];
            }
        }
        if (wn->requires_grad) {  // dW = x^T . g
          Tensor<T>& gw = wn->grad_buf();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t p = 0; p < f; ++p) {
              const T xv = xn->value[i * f + p];
              for (std::size_t j = 0; j < k; ++j)
                gw[p * k + j] += xv * g[i * k + j];
            }
        }
        if (bn->requires_grad) {
          Tensor<T>& gb = bn->grad_buf();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) gb[j] += g[i * k + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Shape / row ops
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  auto an = a.node();
  detail::require(shape_numel(shape) == an->value.size(),
                  "reshape: size mismatch " + shape_str(an->value.shape()) +
                      " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape));
  std::copy(an->value.data(), an->value.data() + an->value.size(), out.data());
  return graph::make_op<T>(std::move(out), {an},
                           [an](const Tensor<T>& g) {
                             Tensor<T>& ga = an->grad_buf();
                             for (std::size_t i = 0; i < g.size(); ++i)
                               ga[i] += g[i];
                           });
}

template <typename T>
Var<T> concat_rows(const Var<T>& a, const Var<T>& b) {
  auto an = a.node(), bn = b.node();
  detail::require(an->value.rank() >= 1 && bn->value.rank() >= 1 &&
                      an->value.rank() == bn->value.rank(),
                  "concat_rows: rank mismatch");
  Shape sa = an->value.shape(), sb = bn->value.shape();
  for (std::size_t i = 1; i < sa.size(); ++i)
    detail::require(sa[i] == sb[i], "concat_rows: trailing dims differ");
  Shape so = sa;
  so[0] += sb[0];
  Tensor<T> out(so);
  std::copy(an->value.data(), an->value.data() + an->value.size(), out.data());
  std::copy(bn->value.data(), bn->value.data() + bn->value.size(),
            out.data() + an->value.size());
  const std::size_t asize = an->value.size();
  return graph::make_op<T>(
      std::move(out), {an, bn},
      [an, bn, asize](const Tensor<T>& g) {
        if (an->requires_grad) {
          Tensor<T>& ga = an->grad_buf();
          for (std::size_t i = 0; i < asize; ++i) ga[i] += g[i];
        }
        if (bn->requires_grad) {
          Tensor<T>& gb = bn->grad_buf();
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[asize + i];
        }
      });
}

// out row i = x row idx[i]; idx need not be a bijection, the backward pass
// scatter-adds.
template <typename T>
Var<T> take_rows(const Var<T>& x, std::vector<std::size_t> idx) {
  auto xn = x.node();
  detail::require(xn->value.rank() >= 1, "take_rows: rank 0 input");
  const std::size_t rows = xn->value.dim(0);
  const std::size_t rowsz = xn->value.size() / rows;
  for (std::size_t i : idx)
    detail::require(i < rows, "take_rows: index out of range");
  Shape so = xn->value.shape();
  so[0] = idx.size();
  Tensor<T> out(so);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy(xn->value.data() + idx[i] * rowsz,
              xn->value.data() + (idx[i] + 1) * rowsz, out.data() + i * rowsz);
  return graph::make_op<T>(std::move(out), {xn},
                           [xn, idx = std::move(idx), rowsz](const Tensor<T>& g) {
                             Tensor<T>& gx = xn->grad_buf();
                             for (std::size_t i = 0; i < idx.size(); ++i) {
                               T* dst = gx.data() + idx[i] * rowsz;
                               const T* src = g.data() + i * rowsz;
                               for (std::size_t j = 0; j < rowsz; ++j)
                                 dst[j] += src[j];
                             }
                           });
}

// out row i = e[i] * x row i + (1 - e[i]) * y row i. Coefficients are plain
// numbers; no gradient flows into them.
template <typename T>
Var<T> lerp_rows(const Var<T>& x, const Var<T>& y, std::vector<T> e) {
  auto xn = x.node(), yn = y.node();
  detail::require_same_shape(xn->value, yn->value, "lerp_rows");
  const std::size_t rows = xn->value.dim(0);
  detail::require(e.size() == rows, "lerp_rows: one coefficient per row");
  const std::size_t rowsz = xn->value.size() / rows;
  Tensor<T> out(xn->value.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const T ei = e[i];
    const T* xs = xn->value.data() + i * rowsz;
    const T* ys = yn->value.data() + i * rowsz;
    T* dst = out.data() + i * rowsz;
    for (std::size_t j = 0; j < rowsz; ++j)
      dst[j] = ei * xs[j] + (T(1) - ei) * ys[j];
  }
  return graph::make_op<T>(
      std::move(out), {xn, yn},
      [xn, yn, e = std::move(e), rowsz](const Tensor<T>& g) {
        for (std::size_t i = 0; i < e.size(); ++i) {
          const T* src = g.data() + i * rowsz;
          if (xn->requires_grad) {
            T* dst = xn->grad_buf().data() + i * rowsz;
            for (std::size_t j = 0; j < rowsz; ++j) dst[j] += e[i] * src[j];
          }
          if (yn->requires_grad) {
            T* dst = yn->grad_buf().data() + i * rowsz;
            for (std::size_t j = 0; j < rowsz; ++j)
              dst[j] += (T(1) - e[i]) * src[j];
          }
        }
      });
}

template <typename T>
Var<T> scale_rows(const Var<T>& x, std::vector<T> s) {
  auto xn = x.node();
  const std::size_t rows = xn->value.dim(0);
  detail::require(s.size() == rows, "scale_rows: one factor per row");
  const std::size_t rowsz = xn->value.size() / rows;
  Tensor<T> out(xn->value.shape());
  for (std::size_t i = 0; i < rows; ++i) {
    const T* src = xn->value.data() + i * rowsz;
    T* dst = out.data() + i * rowsz;
    for (std::size_t j = 0; j < rowsz; ++j) dst[j] = s[i] * src[j];
  }
  return graph::make_op<T>(std::move(out), {xn},
                           [xn, s = std::move(s), rowsz](const Tensor<T>& g) {
                             Tensor<T>& gx = xn->grad_buf();
                             for (std::size_t i = 0; i < s.size(); ++i) {
                               const T* src = g.data() + i * rowsz;
                               T* dst = gx.data() + i * rowsz;
                               for (std::size_t j = 0; j < rowsz; ++j)
                                 dst[j] += s[i] * src[j];
                             }
                           });
}

// ---------------------------------------------------------------------------
// Similarity / loss building blocks
// ---------------------------------------------------------------------------

// Rows scaled to unit L2 norm. du = (g - (g.u) u) / |x|.
template <typename T>
Var<T> row_l2_normalize(const Var<T>& x) {
  auto xn = x.node();
  detail::require(xn->value.rank() == 2, "row_l2_normalize: expected NxF");
  const std::size_t n = xn->value.dim(0), f = xn->value.dim(1);
  Tensor<T> out(xn->value.shape());
  std::vector<T> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T* src = xn->value.data() + i * f;
    T acc = 0;
    for (std::size_t j = 0; j < f; ++j) acc += src[j] * src[j];
    const T norm = std::sqrt(acc);
    if (norm == T(0))
      throw std::domain_error("row_l2_normalize: zero-norm row " +
                              std::to_string(i));
    norms[i] = norm;
    T* dst = out.data() + i * f;
    for (std::size_t j = 0; j < f; ++j) dst[j] = src[j] / norm;
  }
  Tensor<T> out_copy = out;
  return graph::make_op<T>(
      std::move(out), {xn},
      [xn, out_copy, norms = std::move(norms), f](const Tensor<T>& g) {
        Tensor<T>& gx = xn->grad_buf();
        for (std::size_t i = 0; i < norms.size(); ++i) {
          const T* grow = g.data() + i * f;
          const T* urow = out_copy.data() + i * f;
          T dot = 0;
          for (std::size_t j = 0; j < f; ++j) dot += grow[j] * urow[j];
          T* dst = gx.data() + i * f;
          const T inv = T(1) / norms[i];
          for (std::size_t j = 0; j < f; ++j)
            dst[j] += (grow[j] - dot * urow[j]) * inv;
        }
      });
}

// S[n,k] = a row n . b row k  (a: NxF, b: KxF -> NxK)
template <typename T>
Var<T> pairwise_dot(const Var<T>& a, const Var<T>& b) {
  auto an = a.node(), bn = b.node();
  detail::require(an->value.rank() == 2 && bn->value.rank() == 2 &&
                      an->value.dim(1) == bn->value.dim(1),
                  "pairwise_dot: expected NxF and KxF");
  const std::size_t n = an->value.dim(0), k = bn->value.dim(0),
                    f = an->value.dim(1);
  Tensor<T> out(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = an->value.data() + i * f;
    T* orow = out.data() + i * k;
    for (std::size_t p = 0; p < f; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      // b column p has stride f; walk rows instead for contiguity
      for (std::size_t j = 0; j < k; ++j) orow[j] += av * bn->value[j * f + p];
    }
  }
  return graph::make_op<T>(
      std::move(out), {an, bn},
      [an, bn, n, k, f](const Tensor<T>& g) {
        if (an->requires_grad) {  // dA = G . B
          Tensor<T>& ga = an->grad_buf();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const T gv = g[i * k + j];
              if (gv == T(0)) continue;
              const T* brow = bn->value.data() + j * f;
              T* dst = ga.data() + i * f;
              for (std::size_t p = 0; p < f; ++p) dst[p] += gv * brow[p];
            }
        }
        if (bn->requires_grad) {  // dB = G^T . A
          Tensor<T>& gb = bn->grad_buf();
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const T gv = g[i * k + j];
              if (gv == T(0)) continue;
              const T* arow = an->value.data() + i * f;
              T* dst = gb.data() + j * f;
              for (std::size_t p = 0; p < f; ++p) dst[p] += gv * arow[p];
            }
        }
      });
}

// out[n] = s[n, idx[n]]
template <typename T>
Var<T> gather_cols(const Var<T>& s, std::vector<std::size_t> idx) {
  auto sn = s.node();
  detail::require(sn->value.rank() == 2, "gather_cols: expected NxK");
  const std::size_t n = sn->value.dim(0), k = sn->value.dim(1);
  detail::require(idx.size() == n, "gather_cols: one index per row");
  for (std::size_t i : idx)
    detail::require(i < k, "gather_cols: index out of range");
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) out[i] = sn->value[i * k + idx[i]];
  return graph::make_op<T>(std::move(out), {sn},
                           [sn, idx = std::move(idx), k](const Tensor<T>& g) {
                             Tensor<T>& gs = sn->grad_buf();
                             for (std::size_t i = 0; i < idx.size(); ++i)
                               gs[i * k + idx[i]] += g[i];
                           });
}

// out[n] = log sum_{k != excluded[n]} exp(s[n,k]), numerically stabilised.
template <typename T>
Var<T> logsumexp_excluding(const Var<T>& s, std::vector<std::size_t> excluded) {
  auto sn = s.node();
  detail::require(sn->value.rank() == 2, "logsumexp_excluding: expected NxK");
  const std::size_t n = sn->value.dim(0), k = sn->value.dim(1);
  detail::require(excluded.size() == n,
                  "logsumexp_excluding: one exclusion per row");
  detail::require(k >= 2, "logsumexp_excluding: need at least 2 columns");
  Tensor<T> out(Shape{n});
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = sn->value.data() + i * k;
    T m = std::numeric_limits<T>::lowest();
    for (std::size_t j = 0; j < k; ++j)
      if (j != excluded[i]) m = std::max(m, row[j]);
    T acc = 0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != excluded[i]) acc += std::exp(row[j] - m);
    out[i] = m + std::log(acc);
  }
  Tensor<T> out_copy = out;
  return graph::make_op<T>(
      std::move(out), {sn},
      [sn, excluded = std::move(excluded), out_copy, k](const Tensor<T>& g) {
        Tensor<T>& gs = sn->grad_buf();
        for (std::size_t i = 0; i < excluded.size(); ++i) {
          const T* row = sn->value.data() + i * k;
          T* dst = gs.data() + i * k;
          for (std::size_t j = 0; j < k; ++j)
            if (j != excluded[i])
              dst[j] += g[i] * std::exp(row[j] - out_copy[i]);
        }
      });
}

// Mean over the batch of -log softmax(logits)[label]; labels are 0-based.
template <typename T>
Var<T> softmax_cross_entropy(const Var<T>& logits,
                             const std::vector<std::size_t>& labels) {
  auto ln = logits.node();
  detail::require(ln->value.rank() == 2,
                  "softmax_cross_entropy: expected NxC logits");
  const std::size_t n = ln->value.dim(0), c = ln->value.dim(1);
  detail::require(labels.size() == n,
                  "softmax_cross_entropy: one label per row");
  for (std::size_t y : labels)
    detail::require(y < c, "softmax_cross_entropy: label out of range");
  Tensor<T> probs(Shape{n, c});
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = ln->value.data() + i * c;
    T m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T denom = 0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
    const T logdenom = std::log(denom);
    for (std::size_t j = 0; j < c; ++j)
      probs[i * c + j] = std::exp(row[j] - m) / denom;
    loss -= (row[labels[i]] - m - logdenom);
  }
  loss /= T(n);
  return graph::make_op<T>(
      Tensor<T>::scalar(loss), {ln},
      [ln, probs, labels, n, c](const Tensor<T>& g) {
        Tensor<T>& gl = ln->grad_buf();
        const T scale = g[0] / T(n);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < c; ++j) {
            T v = probs[i * c + j];
            if (j == labels[i]) v -= T(1);
            gl[i * c + j] += scale * v;
          }
      });
}

// Softmax probabilities without graph involvement (evaluation path).
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  detail::require(logits.rank() == 2, "softmax_rows: expected NxC");
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  Tensor<T> out(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    T m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T denom = 0;
    for (std::size_t j = 0; j < c; ++j) denom += std::exp(row[j] - m);
    for (std::size_t j = 0; j < c; ++j)
      out[i * c + j] = std::exp(row[j] - m) / denom;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

template <typename T>
struct GradCheckReport {
  T max_rel_err = 0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
};

// f maps a vector of Vars to a scalar Var. Compares reverse-mode gradients
// against central differences; relative error uses max(|a|, |n|, 1e-8).
template <typename T, typename F>
GradCheckReport<T> grad_check(F&& f, const std::vector<Tensor<T>>& points,
                              T h = T(1e-5)) {
  detail::require(h > T(0), "grad_check: h must be positive");
  std::vector<Var<T>> vars;
  vars.reserve(points.size());
  for (const auto& p : points) vars.push_back(Var<T>::param(p));
  Var<T> y = f(vars);
  if (y.value().size() != 1)
    throw std::invalid_argument("grad_check: f returned non-scalar " +
                                shape_str(y.value().shape()));
  backward(y);

  auto eval = [&](const std::vector<Tensor<T>>& at) {
    std::vector<Var<T>> cs;
    cs.reserve(at.size());
    for (const auto& p : at) cs.push_back(Var<T>::constant(p));
    return f(cs).value().item();
  };

  GradCheckReport<T> rep;
  std::vector<Tensor<T>> work = points;
  for (std::size_t vi = 0; vi < points.size(); ++vi) {
    for (std::size_t j = 0; j < points[vi].size(); ++j) {
      const T orig = work[vi][j];
      work[vi][j] = orig + h;
      const T fp = eval(work);
      work[vi][j] = orig - h;
      const T fm = eval(work);
      work[vi][j] = orig;
      const T numeric = (fp - fm) / (2 * h);
      const T analytic =
          vars[vi].has_grad() ? vars[vi].grad()[j] : T(0);
      const T denom = std::max(
          {std::abs(analytic), std::abs(numeric), T(1e-8)});
      const T rel = std::abs(analytic - numeric) / denom;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_input = vi;
        rep.worst_index = j;
      }
    }
  }
  return rep;
}

template <typename T, typename F>
GradCheckReport<T> grad_check(F&& f, std::initializer_list<Tensor<T>> points,
                              T h = T(1e-5)) {
  return grad_check(std::forward<F>(f), std::vector<Tensor<T>>(points), h);
}

}  // namespace deco
