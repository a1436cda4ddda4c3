// Dense row-major tensors and the numeric kernels used by the rest of the
// library. Everything is single-threaded with a fixed accumulation order so
// repeated runs are bitwise identical.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace deco {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

// A rank-0 tensor (empty shape) is a scalar: numel == 1.
template <typename T>
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, T(0)) {}

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {
    check_positive_extents();
  }

  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_positive_extents();
  }

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    check_positive_extents();
    if (data_.size() != shape_numel(shape_))
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(data_.size()) +
                                  " does not match shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) {
    Tensor t;
    t.data_[0] = v;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const T& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  T item() const {
    if (data_.size() != 1)
      throw std::invalid_argument("item() on non-scalar tensor " +
                                  shape_str(shape_));
    return data_[0];
  }

 private:
  void check_positive_extents() const {
    for (std::size_t d : shape_)
      if (d == 0) throw std::invalid_argument("zero extent in shape " +
                                              shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                        const char* op) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops. Tensor-tensor forms require equal shapes; scalar forms are
// the only broadcasting supported.
// ---------------------------------------------------------------------------

template <typename T, typename F>
Tensor<T> ew_map(const Tensor<T>& a, F f) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

template <typename T, typename F>
Tensor<T> ew_zip(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
  detail::require_same_shape(a, b, op);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return ew_zip(a, b, "add", [](T x, T y) { return x + y; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return ew_zip(a, b, "sub", [](T x, T y) { return x - y; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return ew_zip(a, b, "mul", [](T x, T y) { return x * y; });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "div");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (b[i] == T(0)) throw std::domain_error("div: zero divisor");
    out[i] = a[i] / b[i];
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, T s) {
  return ew_map(a, [s](T x) { return x + s; });
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, T s) {
  return ew_map(a, [s](T x) { return x - s; });
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, T s) {
  return ew_map(a, [s](T x) { return x * s; });
}
template <typename T>
Tensor<T> div(const Tensor<T>& a, T s) {
  if (s == T(0)) throw std::domain_error("div: zero divisor");
  return ew_map(a, [s](T x) { return x / s; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return ew_map(a, [](T x) { return x > T(0) ? x : T(0); });
}
template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return ew_map(a, [](T x) { return std::exp(x); });
}
template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] > T(0))) throw std::domain_error("log: non-positive input");
    out[i] = std::log(a[i]);
  }
  return out;
}
template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return ew_map(a, [](T x) { return -x; });
}

// ---------------------------------------------------------------------------
// Reductions. Accumulation walks the input in flat row-major order, so the
// summation order is fixed regardless of which axes are reduced.
// ---------------------------------------------------------------------------

enum class ReduceKind { kSum, kMean, kMax };

template <typename T>
Tensor<T> reduce(ReduceKind kind, const Tensor<T>& a,
                 std::vector<std::size_t> axes) {
  std::sort(axes.begin(), axes.end());
  axes.erase(std::unique(axes.begin(), axes.end()), axes.end());
  for (std::size_t ax : axes)
    detail::require(ax < a.rank(), "reduce: axis " + std::to_string(ax) +
                                       " out of range for " +
                                       shape_str(a.shape()));

  std::vector<bool> reduced(a.rank(), false);
  for (std::size_t ax : axes) reduced[ax] = true;

  Shape out_shape;
  std::size_t group = 1;  // elements folded into each output cell
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (reduced[i])
      group *= a.dim(i);
    else
      out_shape.push_back(a.dim(i));
  }

  const T init = kind == ReduceKind::kMax
                     ? std::numeric_limits<T>::lowest()
                     : T(0);
  Tensor<T> out(out_shape, init);

  // Row-major walk; out index recomputed from the surviving axes.
  std::vector<std::size_t> idx(a.rank(), 0);
  for (std::size_t flat = 0; flat < a.size(); ++flat) {
    std::size_t out_flat = 0;
    for (std::size_t i = 0; i < a.rank(); ++i) {
      if (!reduced[i]) out_flat = out_flat * a.dim(i) + idx[i];
    }
    if (kind == ReduceKind::kMax)
      out[out_flat] = std::max(out[out_flat], a[flat]);
    else
      out[out_flat] += a[flat];
    for (std::size_t i = a.rank(); i-- > 0;) {
      if (++idx[i] < a.dim(i)) break;
      idx[i] = 0;
    }
  }

  if (kind == ReduceKind::kMean)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] /= T(group);
  return out;
}

template <typename T>
T reduce_sum_all(const Tensor<T>& a) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return acc;
}

template <typename T>
T reduce_mean_all(const Tensor<T>& a) {
  return reduce_sum_all(a) / T(a.size());
}

template <typename T>
T reduce_max_all(const Tensor<T>& a) {
  T m = std::numeric_limits<T>::lowest();
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, a[i]);
  return m;
}

// NCHW -> NC mean over the spatial extent.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expected NCHW, got " +
                                     shape_str(x.shape()));
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c});
  const T* src = x.data();
  for (std::size_t i = 0; i < n * c; ++i) {
    T acc = 0;
    for (std::size_t j = 0; j < hw; ++j) acc += src[i * hw + j];
    out[i] = acc / T(hw);
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation) and linear, plus the pieces of their backward
// passes. Implemented through im2col so the inner loops vectorise; each
// output element still accumulates its terms in a fixed order.
// ---------------------------------------------------------------------------

struct Conv2dDims {
  std::size_t n, cin, h, w;       // input
  std::size_t cout, kh, kw;       // kernel
  std::size_t stride, pad;
  std::size_t hout, wout;
};

template <typename T>
Conv2dDims conv2d_dims(const Tensor<T>& x, const Tensor<T>& k,
                       std::size_t stride, std::size_t pad) {
  detail::require(x.rank() == 4, "conv2d: input must be NCHW, got " +
                                     shape_str(x.shape()));
  detail::require(k.rank() == 4, "conv2d: kernel must be OIKK, got " +
                                     shape_str(k.shape()));
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  Conv2dDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = k.dim(0);
  d.kh = k.dim(2);
  d.kw = k.dim(3);
  d.stride = stride;
  d.pad = pad;
  detail::require(k.dim(1) == d.cin,
                  "conv2d: kernel input channels " + std::to_string(k.dim(1)) +
                      " != input channels " + std::to_string(d.cin));
  detail::require(d.h + 2 * pad >= d.kh && d.w + 2 * pad >= d.kw,
                  "conv2d: kernel larger than padded input");
  d.hout = (d.h + 2 * pad - d.kh) / stride + 1;
  d.wout = (d.w + 2 * pad - d.kw) / stride + 1;
  detail::require(d.hout >= 1 && d.wout >= 1, "conv2d: empty output");
  return d;
}

namespace detail {

// Patch matrix for one sample: rows = cin*kh*kw, cols = hout*wout.
template <typename T>
void im2col(const T* x, const Conv2dDims& d, T* col) {
  const std::size_t cols = d.hout * d.wout;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    const T* plane = x + ci * d.h * d.w;
    for (std::size_t kh = 0; kh < d.kh; ++kh) {
      for (std::size_t kw = 0; kw < d.kw; ++kw) {
        T* row = col + ((ci * d.kh + kh) * d.kw + kw) * cols;
        for (std::size_t oh = 0; oh < d.hout; ++oh) {
          const std::ptrdiff_t ih =
              std::ptrdiff_t(oh * d.stride + kh) - std::ptrdiff_t(d.pad);
          T* dst = row + oh * d.wout;
          if (ih < 0 || ih >= std::ptrdiff_t(d.h)) {
            std::fill(dst, dst + d.wout, T(0));
            continue;
          }
          const T* src = plane + std::size_t(ih) * d.w;
          for (std::size_t ow = 0; ow < d.wout; ++ow) {
            const std::ptrdiff_t iw =
                std::ptrdiff_t(ow * d.stride + kw) - std::ptrdiff_t(d.pad);
            dst[ow] = (iw < 0 || iw >= std::ptrdiff_t(d.w))
                          ? T(0)
                          : src[std::size_t(iw)];
          }
        }
      }
    }
  }
}

// Scatter-add of a patch-gradient matrix back into the input gradient.
template <typename T>
void col2im_add(const T* col, const Conv2dDims& d, T* dx) {
  const std::size_t cols = d.hout * d.wout;
  for (std::size_t ci = 0; ci < d.cin; ++ci) {
    T* plane = dx + ci * d.h * d.w;
    for (std::size_t kh = 0; kh < d.kh; ++kh) {
      for (std::size_t kw = 0; kw < d.kw; ++kw) {
        const T* row = col + ((ci * d.kh + kh) * d.kw + kw) * cols;
        for (std::size_t oh = 0; oh < d.hout; ++oh) {
          const std::ptrdiff_t ih =
              std::ptrdiff_t(oh * d.stride + kh) - std::ptrdiff_t(d.pad);
          if (ih < 0 || ih >= std::ptrdiff_t(d.h)) continue;
          const T* src = row + oh * d.wout;
          T* dst = plane + std::size_t(ih) * d.w;
          for (std::size_t ow = 0; ow < d.wout; ++ow) {
            const std::ptrdiff_t iw =
                std::ptrdiff_t(ow * d.stride + kw) - std::ptrdiff_t(d.pad);
            if (iw >= 0 && iw < std::ptrdiff_t(d.w))
              dst[std::size_t(iw)] += src[ow];
          }
        }
      }
    }
  }
}

// C[m,:] += sum_k A[m,k] * B[k,:]  -- the k loop is sequential per output
// element, the column loop is independent and free to vectorise.
template <typename T>
void matmul_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a[i * k + p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                 std::size_t pad) {
  const Conv2dDims d = conv2d_dims(x, k, stride, pad);
  const std::size_t cols = d.hout * d.wout;
  const std::size_t krows = d.cin * d.kh * d.kw;
  Tensor<T> out(Shape{d.n, d.cout, d.hout, d.wout});
  std::vector<T> col(krows * cols);
  for (std::size_t s = 0; s < d.n; ++s) {
    detail::im2col(x.data() + s * d.cin * d.h * d.w, d, col.data());
    detail::matmul_acc(k.data(), col.data(), out.data() + s * d.cout * cols,
                       d.cout, krows, cols);
  }
  return out;
}

// Backward helpers shared with the autodiff layer.
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& k,
                     const Tensor<T>& grad_out, std::size_t stride,
                     std::size_t pad, Tensor<T>* dx, Tensor<T>* dk) {
  const Conv2dDims d = conv2d_dims(x, k, stride, pad);
  const std::size_t cols = d.hout * d.wout;
  const std::size_t krows = d.cin * d.kh * d.kw;
  std::vector<T> col(krows * cols);
  std::vector<T> dcol(krows * cols);
  for (std::size_t s = 0; s < d.n; ++s) {
    const T* g = grad_out.data() + s * d.cout * cols;
    if (dk) {
      detail::im2col(x.data() + s * d.cin * d.h * d.w, d, col.data());
      // dK[o,p] += sum_j g[o,j] * col[p,j], accumulated via per-column rank-1
      // updates so the inner loop stays contiguous.
      T* dkd = dk->data();
      for (std::size_t o = 0; o < d.cout; ++o) {
        const T* grow = g + o * cols;
        T* dkrow = dkd + o * krows;
        for (std::size_t p = 0; p < krows; ++p) {
          const T* crow = col.data() + p * cols;
          T acc = 0;
          for (std::size_t j = 0; j < cols; ++j) acc += grow[j] * crow[j];
          dkrow[p] += acc;
        }
      }
    }
    if (dx) {
      std::fill(dcol.begin(), dcol.end(), T(0));
      // dcol[p,:] += sum_o K[o,p] * g[o,:]
      for (std::size_t o = 0; o < d.cout; ++o) {
        const T* grow = g + o * cols;
        const T* krow = k.data() + o * krows;
        for (std::size_t p = 0; p < krows; ++p) {
          const T kv = krow[p];
          if (kv == T(0)) continue;
          T* drow = dcol.data() + p * cols;
          for (std::size_t j = 0; j < cols; ++j) drow[j] += kv * grow[j];
        }
      }
      detail::col2im_add(dcol.data(), d, dx->data() + s * d.cin * d.h * d.w);
    }
  }
}

// x: NxF, w: FxK, b: K -> NxK
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1,
                  "linear: expected x NxF, w FxK, b K");
  const std::size_t n = x.dim(0), f = x.dim(1), k = w.dim(1);
  detail::require(w.dim(0) == f, "linear: inner dimensions " +
                                     std::to_string(f) + " vs " +
                                     std::to_string(w.dim(0)));
  detail::require(b.dim(0) == k, "linear: bias length mismatch");
  Tensor<T> out(Shape{n, k});
  for (std::size_t i = 0; i < n; ++i) {
    T* orow = out.data() + i * k;
    for (std::size_t j = 0; j < k; ++j) orow[j] = b[j];
  }
  detail::matmul_acc(x.data(), w.data(), out.data(), n, f, k);
  return out;
}

}  // namespace deco
