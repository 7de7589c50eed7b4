#pragma once

// Dense rank-4 tensors (batch, channel, height, width) with reverse-mode
// differentiation over a dynamically recorded graph. The engine is templated
// on the scalar type: float is the working precision, double backs the
// finite-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "scn/common.hpp"

namespace scn {

struct Shape {
  int b = 0, c = 0, h = 0, w = 0;

  bool operator==(const Shape&) const = default;

  std::size_t numel() const {
    if (b < 0 || c < 0 || h < 0 || w < 0) throw SizeError("negative dim");
    unsigned long long n = 1;
    for (long long d : {b, c, h, w}) {
      if (d != 0 && n > (1ull << 40) / static_cast<unsigned long long>(d)) {
        throw SizeError("dimension product overflow: " + str());
      }
      n *= static_cast<unsigned long long>(d);
    }
    return static_cast<std::size_t>(n);
  }

  std::string str() const {
    return "(" + std::to_string(b) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

enum class OpKind {
  leaf,
  conv2d,
  conv_transpose2d,
  relu,
  add,
  sub,
  mul,
  scale,
  sum,
  mean_abs_diff,
  pixel_shuffle,
  pixel_unshuffle,
  pad_replicate,
  crop,
  concat_channels,
  bilinear_resize,
  avgpool_down,
  nearest_up,
};

namespace detail {
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// Disables graph recording for the enclosing scope (inference paths).
struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <class T>
struct TensorImplT;

/// Backward-traversal record: op tag, parent links, and a closure that
/// scatters the output gradient into the parents' grad buffers.
template <class T>
struct GraphRecordT {
  OpKind kind = OpKind::leaf;
  std::vector<std::shared_ptr<TensorImplT<T>>> parents;
  std::function<void(const std::vector<T>& out_grad)> backward_fn;
};

template <class T>
struct TensorImplT {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // lazily allocated; only when requires_grad
  std::unique_ptr<GraphRecordT<T>> node;  // null for leaves
};

template <class T>
class TensorT {
 public:
  TensorT() = default;

  static TensorT zeros(Shape s, bool requires_grad = false) {
    return make(s, std::vector<T>(s.numel(), T(0)), requires_grad);
  }

  static TensorT constant(Shape s, T value, bool requires_grad = false) {
    return make(s, std::vector<T>(s.numel(), value), requires_grad);
  }

  static TensorT uniform(Shape s, T lo, T hi, std::uint64_t seed,
                         bool requires_grad = false) {
    if (!(lo < hi)) throw ConfigError("uniform fill needs lo < hi");
    Rng rng(seed);
    std::vector<T> v(s.numel());
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return make(s, std::move(v), requires_grad);
  }

  static TensorT he_normal(Shape s, int fan_in, std::uint64_t seed,
                           bool requires_grad = false) {
    if (fan_in <= 0) throw ConfigError("he_normal fill needs fan_in > 0");
    Rng rng(seed);
    double std_dev = std::sqrt(2.0 / fan_in);
    std::vector<T> v(s.numel());
    for (auto& x : v) x = static_cast<T>(rng.normal() * std_dev);
    return make(s, std::move(v), requires_grad);
  }

  static TensorT from_data(Shape s, std::vector<T> values,
                           bool requires_grad = false) {
    if (values.size() != s.numel()) {
      throw ShapeError("data length " + std::to_string(values.size()) +
                       " does not match dims " + s.str());
    }
    return make(s, std::move(values), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t numel() const { return impl_->data.size(); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }

  const std::vector<T>& data() const { return impl_->data; }
  std::vector<T>& mutable_data() { return impl_->data; }

  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  const std::vector<T>& grad() const {
    if (!has_grad()) throw TrainError("tensor has no gradient");
    return impl_->grad;
  }
  void zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0));
  }

  T at(int b, int c, int y, int x) const {
    const Shape& s = impl_->shape;
    return impl_->data[((static_cast<std::size_t>(b) * s.c + c) * s.h + y) * s.w + x];
  }

  /// Scalar (1,1,1,1) value.
  T value() const {
    if (numel() != 1) throw ShapeError("value() on non-scalar " + shape().str());
    return impl_->data[0];
  }

  std::shared_ptr<TensorImplT<T>> impl() const { return impl_; }

 private:
  static TensorT make(Shape s, std::vector<T> v, bool requires_grad) {
    TensorT t;
    t.impl_ = std::make_shared<TensorImplT<T>>();
    t.impl_->shape = s;
    t.impl_->data = std::move(v);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  template <class U>
  friend TensorT<U> record(OpKind, Shape, std::vector<U>,
                           std::vector<TensorT<U>>,
                           std::function<void(const std::vector<U>&)>);

  std::shared_ptr<TensorImplT<T>> impl_;
};

using Tensor = TensorT<float>;
using Tensor64 = TensorT<double>;

namespace detail {

template <class T>
std::vector<T>* grad_buffer(const std::shared_ptr<TensorImplT<T>>& p) {
  if (!p->requires_grad) return nullptr;
  if (p->grad.empty()) p->grad.assign(p->data.size(), T(0));
  return &p->grad;
}

}  // namespace detail

/// Wraps an op result: attaches a graph record when recording is on and some
/// parent is on the gradient path.
template <class T>
TensorT<T> record(OpKind kind, Shape shape, std::vector<T> values,
                  std::vector<TensorT<T>> parents,
                  std::function<void(const std::vector<T>&)> backward_fn) {
  TensorT<T> out;
  out.impl_ = std::make_shared<TensorImplT<T>>();
  out.impl_->shape = shape;
  out.impl_->data = std::move(values);
  bool track = false;
  if (grad_enabled()) {
    for (const auto& p : parents) track = track || p.requires_grad();
  }
  out.impl_->requires_grad = track;
  if (track) {
    auto rec = std::make_unique<GraphRecordT<T>>();
    rec->kind = kind;
    for (const auto& p : parents) rec->parents.push_back(p.impl());
    rec->backward_fn = std::move(backward_fn);
    out.impl_->node = std::move(rec);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

template <class T>
void check_same_shape(const TensorT<T>& a, const TensorT<T>& b,
                      const char* op) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError(std::string(op) + ": dims mismatch " + a.shape().str() +
                     " vs " + b.shape().str());
  }
}

template <class T>
TensorT<T> add(const TensorT<T>& x, const TensorT<T>& y) {
  check_same_shape(x, y, "add");
  std::vector<T> v(x.numel());
  const auto& xd = x.data();
  const auto& yd = y.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] + yd[i];
  auto xi = x.impl(), yi = y.impl();
  return record<T>(OpKind::add, x.shape(), std::move(v), {x, y},
                   [xi, yi](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                     }
                     if (auto* gy = detail::grad_buffer(yi)) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gy)[i] += g[i];
                     }
                   });
}

template <class T>
TensorT<T> sub(const TensorT<T>& x, const TensorT<T>& y) {
  check_same_shape(x, y, "sub");
  std::vector<T> v(x.numel());
  const auto& xd = x.data();
  const auto& yd = y.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] - yd[i];
  auto xi = x.impl(), yi = y.impl();
  return record<T>(OpKind::sub, x.shape(), std::move(v), {x, y},
                   [xi, yi](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                     }
                     if (auto* gy = detail::grad_buffer(yi)) {
                       for (std::size_t i = 0; i < g.size(); ++i) (*gy)[i] -= g[i];
                     }
                   });
}

template <class T>
TensorT<T> mul(const TensorT<T>& x, const TensorT<T>& y) {
  check_same_shape(x, y, "mul");
  std::vector<T> v(x.numel());
  const auto& xd = x.data();
  const auto& yd = y.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] * yd[i];
  auto xi = x.impl(), yi = y.impl();
  return record<T>(OpKind::mul, x.shape(), std::move(v), {x, y},
                   [xi, yi](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         (*gx)[i] += g[i] * yi->data[i];
                     }
                     if (auto* gy = detail::grad_buffer(yi)) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         (*gy)[i] += g[i] * xi->data[i];
                     }
                   });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, T factor) {
  std::vector<T> v(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] * factor;
  auto xi = x.impl();
  return record<T>(OpKind::scale, x.shape(), std::move(v), {x},
                   [xi, factor](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         (*gx)[i] += g[i] * factor;
                     }
                   });
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  std::vector<T> v(x.numel());
  const auto& xd = x.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = xd[i] > T(0) ? xd[i] : T(0);
  auto xi = x.impl();
  // subgradient at exactly 0 is 0
  return record<T>(OpKind::relu, x.shape(), std::move(v), {x},
                   [xi](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         if (xi->data[i] > T(0)) (*gx)[i] += g[i];
                     }
                   });
}

template <class T>
TensorT<T> sum(const TensorT<T>& x) {
  T acc = T(0);
  for (T v : x.data()) acc += v;
  auto xi = x.impl();
  return record<T>(OpKind::sum, Shape{1, 1, 1, 1}, std::vector<T>{acc}, {x},
                   [xi](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       for (auto& v : *gx) v += g[0];
                     }
                   });
}

/// Mean absolute difference (the L1 training loss). Subgradient is the sign
/// of (pred - target), zero at exact ties.
template <class T>
TensorT<T> mean_abs_diff(const TensorT<T>& pred, const TensorT<T>& target) {
  check_same_shape(pred, target, "mean_abs_diff");
  const auto& pd = pred.data();
  const auto& td = target.data();
  T acc = T(0);
  for (std::size_t i = 0; i < pd.size(); ++i) acc += std::abs(pd[i] - td[i]);
  T n = static_cast<T>(pd.size());
  auto pi = pred.impl(), ti = target.impl();
  return record<T>(
      OpKind::mean_abs_diff, Shape{1, 1, 1, 1}, std::vector<T>{acc / n},
      {pred, target}, [pi, ti, n](const std::vector<T>& g) {
        T go = g[0] / n;
        auto* gp = detail::grad_buffer(pi);
        auto* gt = detail::grad_buffer(ti);
        for (std::size_t i = 0; i < pi->data.size(); ++i) {
          T d = pi->data[i] - ti->data[i];
          T s = d > T(0) ? go : (d < T(0) ? -go : T(0));
          if (gp) (*gp)[i] += s;
          if (gt) (*gt)[i] -= s;
        }
      });
}

// ---------------------------------------------------------------------------
// Spatial convolution

template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w,
                  const std::optional<TensorT<T>>& bias, int stride, int pad) {
  const Shape xs = x.shape();  // (B, Cin, H, W)
  const Shape ws = w.shape();  // (Cout, Cin, KH, KW)
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (pad < 0) throw ConfigError("conv2d: pad must be >= 0");
  if (xs.c != ws.c) {
    throw ShapeError("conv2d: channel mismatch, input " + xs.str() +
                     " vs weight " + ws.str());
  }
  if (bias && !(bias->shape() == Shape{1, ws.b, 1, 1})) {
    throw ShapeError("conv2d: bias shape " + bias->shape().str() +
                     " does not match c_out " + std::to_string(ws.b));
  }
  const int B = xs.b, Cin = xs.c, H = xs.h, W = xs.w;
  const int Cout = ws.b, KH = ws.h, KW = ws.w;
  const int num_h = H + 2 * pad - KH;
  const int num_w = W + 2 * pad - KW;
  if (num_h < 0 || num_w < 0) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const int OH = num_h / stride + 1;
  const int OW = num_w / stride + 1;

  Shape os{B, Cout, OH, OW};
  std::vector<T> out(os.numel(), T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();
  const T* bd = bias ? bias->data().data() : nullptr;

  for (int b = 0; b < B; ++b) {
    for (int oc = 0; oc < Cout; ++oc) {
      T* op = out.data() + (static_cast<std::size_t>(b) * Cout + oc) * OH * OW;
      if (bd) {
        for (int i = 0; i < OH * OW; ++i) op[i] = bd[oc];
      }
      for (int ic = 0; ic < Cin; ++ic) {
        const T* xp = xd + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
        const T* wp = wd + (static_cast<std::size_t>(oc) * Cin + ic) * KH * KW;
        for (int ky = 0; ky < KH; ++ky) {
          for (int kx = 0; kx < KW; ++kx) {
            const T wv = wp[ky * KW + kx];
            for (int oh = 0; oh < OH; ++oh) {
              const int ih = oh * stride - pad + ky;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = xp + static_cast<std::size_t>(ih) * W;
              T* orow = op + static_cast<std::size_t>(oh) * OW;
              if (stride == 1) {
                const int lo = std::max(0, pad - kx);
                const int hi = std::min(OW, W + pad - kx);
                const T* xr = xrow + (lo - pad + kx);
                for (int ow = lo; ow < hi; ++ow) orow[ow] += wv * xr[ow - lo];
              } else {
                for (int ow = 0; ow < OW; ++ow) {
                  const int iw = ow * stride - pad + kx;
                  if (iw >= 0 && iw < W) orow[ow] += wv * xrow[iw];
                }
              }
            }
          }
        }
      }
    }
  }

  std::vector<TensorT<T>> parents{x, w};
  if (bias) parents.push_back(*bias);
  auto xi = x.impl(), wi = w.impl();
  auto bi = bias ? bias->impl() : nullptr;
  auto backward = [xi, wi, bi, B, Cin, Cout, H, W, KH, KW, OH, OW, stride,
                   pad](const std::vector<T>& g) {
    auto* gx = detail::grad_buffer(xi);
    auto* gw = detail::grad_buffer(wi);
    const T* xd = xi->data.data();
    const T* wd = wi->data.data();
    for (int b = 0; b < B; ++b) {
      for (int oc = 0; oc < Cout; ++oc) {
        const T* gp = g.data() + (static_cast<std::size_t>(b) * Cout + oc) * OH * OW;
        for (int ic = 0; ic < Cin; ++ic) {
          const T* xp = xd + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
          T* gxp = gx ? gx->data() + (static_cast<std::size_t>(b) * Cin + ic) * H * W
                      : nullptr;
          const std::size_t wbase = (static_cast<std::size_t>(oc) * Cin + ic) * KH * KW;
          for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
              const T wv = wd[wbase + ky * KW + kx];
              T wacc = T(0);
              for (int oh = 0; oh < OH; ++oh) {
                const int ih = oh * stride - pad + ky;
                if (ih < 0 || ih >= H) continue;
                const T* grow = gp + static_cast<std::size_t>(oh) * OW;
                const std::size_t xoff = static_cast<std::size_t>(ih) * W;
                if (stride == 1) {
                  const int lo = std::max(0, pad - kx);
                  const int hi = std::min(OW, W + pad - kx);
                  const int shift = kx - pad;
                  if (gxp) {
                    T* gxrow = gxp + xoff + shift;
                    for (int ow = lo; ow < hi; ++ow) gxrow[ow] += wv * grow[ow];
                  }
                  if (gw) {
                    const T* xrow = xp + xoff + shift;
                    for (int ow = lo; ow < hi; ++ow) wacc += grow[ow] * xrow[ow];
                  }
                } else {
                  for (int ow = 0; ow < OW; ++ow) {
                    const int iw = ow * stride - pad + kx;
                    if (iw < 0 || iw >= W) continue;
                    if (gxp) gxp[xoff + iw] += wv * grow[ow];
                    if (gw) wacc += grow[ow] * xp[xoff + iw];
                  }
                }
              }
              if (gw) (*gw)[wbase + ky * KW + kx] += wacc;
            }
          }
        }
        if (bi) {
          if (auto* gb = detail::grad_buffer(bi)) {
            T acc = T(0);
            for (int i = 0; i < OH * OW; ++i) acc += gp[i];
            (*gb)[oc] += acc;
          }
        }
      }
    }
  };
  return record<T>(OpKind::conv2d, os, std::move(out), std::move(parents),
                   std::move(backward));
}

/// Transposed convolution (fractional-stride upsampling). Weight layout is
/// (c_in, c_out, kh, kw); no padding, no bias — callers pad and crop
/// explicitly.
template <class T>
TensorT<T> conv_transpose2d(const TensorT<T>& x, const TensorT<T>& w,
                            int stride) {
  const Shape xs = x.shape();
  const Shape ws = w.shape();  // (Cin, Cout, KH, KW)
  if (stride < 1) throw ConfigError("conv_transpose2d: stride must be >= 1");
  if (xs.c != ws.b) {
    throw ShapeError("conv_transpose2d: channel mismatch, input " + xs.str() +
                     " vs weight " + ws.str());
  }
  const int B = xs.b, Cin = xs.c, H = xs.h, W = xs.w;
  const int Cout = ws.c, KH = ws.h, KW = ws.w;
  const int OH = (H - 1) * stride + KH;
  const int OW = (W - 1) * stride + KW;
  Shape os{B, Cout, OH, OW};
  std::vector<T> out(os.numel(), T(0));
  const T* xd = x.data().data();
  const T* wd = w.data().data();

  for (int b = 0; b < B; ++b) {
    for (int ic = 0; ic < Cin; ++ic) {
      const T* xp = xd + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
      for (int oc = 0; oc < Cout; ++oc) {
        T* op = out.data() + (static_cast<std::size_t>(b) * Cout + oc) * OH * OW;
        const T* wp = wd + (static_cast<std::size_t>(ic) * Cout + oc) * KH * KW;
        for (int ih = 0; ih < H; ++ih) {
          const T* xrow = xp + static_cast<std::size_t>(ih) * W;
          for (int ky = 0; ky < KH; ++ky) {
            T* orow = op + static_cast<std::size_t>(ih * stride + ky) * OW;
            for (int kx = 0; kx < KW; ++kx) {
              const T wv = wp[ky * KW + kx];
              for (int iw = 0; iw < W; ++iw) {
                orow[iw * stride + kx] += wv * xrow[iw];
              }
            }
          }
        }
      }
    }
  }

  auto xi = x.impl(), wi = w.impl();
  auto backward = [xi, wi, B, Cin, Cout, H, W, KH, KW, OH,
                   OW, stride](const std::vector<T>& g) {
    auto* gx = detail::grad_buffer(xi);
    auto* gw = detail::grad_buffer(wi);
    const T* xd = xi->data.data();
    const T* wd = wi->data.data();
    for (int b = 0; b < B; ++b) {
      for (int ic = 0; ic < Cin; ++ic) {
        const T* xp = xd + (static_cast<std::size_t>(b) * Cin + ic) * H * W;
        T* gxp = gx ? gx->data() + (static_cast<std::size_t>(b) * Cin + ic) * H * W
                    : nullptr;
        for (int oc = 0; oc < Cout; ++oc) {
          const T* gp = g.data() + (static_cast<std::size_t>(b) * Cout + oc) * OH * OW;
          const std::size_t wbase = (static_cast<std::size_t>(ic) * Cout + oc) * KH * KW;
          for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
              const T wv = wd[wbase + ky * KW + kx];
              T wacc = T(0);
              for (int ih = 0; ih < H; ++ih) {
                const T* grow = gp + static_cast<std::size_t>(ih * stride + ky) * OW + kx;
                const T* xrow = xp + static_cast<std::size_t>(ih) * W;
                T* gxrow = gxp ? gxp + static_cast<std::size_t>(ih) * W : nullptr;
                for (int iw = 0; iw < W; ++iw) {
                  const T gv = grow[iw * stride];
                  if (gxrow) gxrow[iw] += wv * gv;
                  wacc += gv * xrow[iw];
                }
              }
              if (gw) (*gw)[wbase + ky * KW + kx] += wacc;
            }
          }
        }
      }
    }
  };
  return record<T>(OpKind::conv_transpose2d, os, std::move(out), {x, w},
                   std::move(backward));
}

// ---------------------------------------------------------------------------
// Layout ops

namespace detail {

// shuffle: (B, c*r^2, H, W) -> (B, c, H*r, W*r); unshuffle is the inverse.
template <class T>
std::vector<T> shuffle_data(const std::vector<T>& in, Shape s, int r,
                            bool inverse) {
  if (!inverse) {
    const int B = s.b, C = s.c / (r * r), H = s.h, W = s.w;
    std::vector<T> out(in.size());
    for (int b = 0; b < B; ++b)
      for (int c = 0; c < C; ++c)
        for (int dy = 0; dy < r; ++dy)
          for (int dx = 0; dx < r; ++dx) {
            const int ci = (c * r + dy) * r + dx;
            const T* src = in.data() + ((static_cast<std::size_t>(b) * s.c + ci) * H) * W;
            for (int y = 0; y < H; ++y) {
              T* dst = out.data() +
                       ((static_cast<std::size_t>(b) * C + c) * (H * r) + (y * r + dy)) *
                           (W * r) +
                       dx;
              for (int x = 0; x < W; ++x) dst[x * r] = src[y * static_cast<std::size_t>(W) + x];
            }
          }
    return out;
  }
  // inverse: s is the shuffled shape (B, c, H*r, W*r)
  const int B = s.b, C = s.c, Hr = s.h, Wr = s.w;
  const int H = Hr / r, W = Wr / r;
  std::vector<T> out(in.size());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int dy = 0; dy < r; ++dy)
        for (int dx = 0; dx < r; ++dx) {
          const int ci = (c * r + dy) * r + dx;
          T* dst = out.data() +
                   ((static_cast<std::size_t>(b) * C * r * r + ci) * H) * W;
          for (int y = 0; y < H; ++y) {
            const T* src = in.data() +
                           ((static_cast<std::size_t>(b) * C + c) * Hr + (y * r + dy)) * Wr +
                           dx;
            for (int x = 0; x < W; ++x) dst[y * static_cast<std::size_t>(W) + x] = src[x * r];
          }
        }
  return out;
}

}  // namespace detail

template <class T>
TensorT<T> pixel_shuffle(const TensorT<T>& x, int r) {
  if (r < 1) throw ConfigError("pixel_shuffle: r must be >= 1");
  const Shape s = x.shape();
  if (s.c % (r * r) != 0) {
    throw ShapeError("pixel_shuffle: channels " + std::to_string(s.c) +
                     " not divisible by r^2 = " + std::to_string(r * r));
  }
  Shape os{s.b, s.c / (r * r), s.h * r, s.w * r};
  auto xi = x.impl();
  return record<T>(OpKind::pixel_shuffle, os,
                   detail::shuffle_data(x.data(), s, r, false), {x},
                   [xi, os, r](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       auto gs = detail::shuffle_data(g, os, r, true);
                       for (std::size_t i = 0; i < gs.size(); ++i) (*gx)[i] += gs[i];
                     }
                   });
}

template <class T>
TensorT<T> pixel_unshuffle(const TensorT<T>& x, int r) {
  if (r < 1) throw ConfigError("pixel_unshuffle: r must be >= 1");
  const Shape s = x.shape();
  if (s.h % r != 0 || s.w % r != 0) {
    throw ShapeError("pixel_unshuffle: spatial dims not divisible by r");
  }
  Shape os{s.b, s.c * r * r, s.h / r, s.w / r};
  auto xi = x.impl();
  return record<T>(OpKind::pixel_unshuffle, os,
                   detail::shuffle_data(x.data(), s, r, true), {x},
                   [xi, os, r](const std::vector<T>& g) {
                     if (auto* gx = detail::grad_buffer(xi)) {
                       auto gs = detail::shuffle_data(g, os, r, false);
                       for (std::size_t i = 0; i < gs.size(); ++i) (*gx)[i] += gs[i];
                     }
                   });
}

template <class T>
TensorT<T> pad_replicate(const TensorT<T>& x, int top, int bottom, int left,
                         int right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) {
    throw ConfigError("pad_replicate: negative padding");
  }
  const Shape s = x.shape();
  if (s.h < 1 || s.w < 1) throw ShapeError("pad_replicate: empty input");
  Shape os{s.b, s.c, s.h + top + bottom, s.w + left + right};
  std::vector<T> out(os.numel());
  const T* xd = x.data().data();
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c) {
      const T* xp = xd + (static_cast<std::size_t>(b) * s.c + c) * s.h * s.w;
      T* op = out.data() + (static_cast<std::size_t>(b) * s.c + c) * os.h * os.w;
      for (int y = 0; y < os.h; ++y) {
        const int sy = std::clamp(y - top, 0, s.h - 1);
        for (int x2 = 0; x2 < os.w; ++x2) {
          const int sx = std::clamp(x2 - left, 0, s.w - 1);
          op[static_cast<std::size_t>(y) * os.w + x2] = xp[static_cast<std::size_t>(sy) * s.w + sx];
        }
      }
    }
  auto xi = x.impl();
  return record<T>(OpKind::pad_replicate, os, std::move(out), {x},
                   [xi, s, os, top, left](const std::vector<T>& g) {
                     auto* gx = detail::grad_buffer(xi);
                     if (!gx) return;
                     for (int b = 0; b < s.b; ++b)
                       for (int c = 0; c < s.c; ++c) {
                         const T* gp = g.data() +
                                       (static_cast<std::size_t>(b) * s.c + c) * os.h * os.w;
                         T* gxp = gx->data() +
                                  (static_cast<std::size_t>(b) * s.c + c) * s.h * s.w;
                         for (int y = 0; y < os.h; ++y) {
                           const int sy = std::clamp(y - top, 0, s.h - 1);
                           for (int x2 = 0; x2 < os.w; ++x2) {
                             const int sx = std::clamp(x2 - left, 0, s.w - 1);
                             gxp[static_cast<std::size_t>(sy) * s.w + sx] +=
                                 gp[static_cast<std::size_t>(y) * os.w + x2];
                           }
                         }
                       }
                   });
}

template <class T>
TensorT<T> crop(const TensorT<T>& x, int top, int left, int out_h, int out_w) {
  const Shape s = x.shape();
  if (top < 0 || left < 0 || out_h < 1 || out_w < 1 || top + out_h > s.h ||
      left + out_w > s.w) {
    throw ShapeError("crop: window out of bounds");
  }
  Shape os{s.b, s.c, out_h, out_w};
  std::vector<T> out(os.numel());
  const T* xd = x.data().data();
  for (int b = 0; b < s.b; ++b)
    for (int c = 0; c < s.c; ++c) {
      const T* xp = xd + (static_cast<std::size_t>(b) * s.c + c) * s.h * s.w;
      T* op = out.data() + (static_cast<std::size_t>(b) * s.c + c) * out_h * out_w;
      for (int y = 0; y < out_h; ++y) {
        const T* src = xp + static_cast<std::size_t>(y + top) * s.w + left;
        std::copy(src, src + out_w, op + static_cast<std::size_t>(y) * out_w);
      }
    }
  auto xi = x.impl();
  return record<T>(OpKind::crop, os, std::move(out), {x},
                   [xi, s, out_h, out_w, top, left](const std::vector<T>& g) {
                     auto* gx = detail::grad_buffer(xi);
                     if (!gx) return;
                     for (int b = 0; b < s.b; ++b)
                       for (int c = 0; c < s.c; ++c) {
                         const T* gp = g.data() +
                                       (static_cast<std::size_t>(b) * s.c + c) * out_h * out_w;
                         T* gxp = gx->data() +
                                  (static_cast<std::size_t>(b) * s.c + c) * s.h * s.w;
                         for (int y = 0; y < out_h; ++y)
                           for (int x2 = 0; x2 < out_w; ++x2)
                             gxp[static_cast<std::size_t>(y + top) * s.w + left + x2] +=
                                 gp[static_cast<std::size_t>(y) * out_w + x2];
                       }
                   });
}

template <class T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  const Shape as = a.shape(), bs = b.shape();
  if (as.b != bs.b || as.h != bs.h || as.w != bs.w) {
    throw ShapeError("concat_channels: dims mismatch " + as.str() + " vs " +
                     bs.str());
  }
  Shape os{as.b, as.c + bs.c, as.h, as.w};
  std::vector<T> out(os.numel());
  const std::size_t plane = static_cast<std::size_t>(as.h) * as.w;
  for (int n = 0; n < as.b; ++n) {
    std::copy(a.data().begin() + n * as.c * plane,
              a.data().begin() + (n + 1) * as.c * plane,
              out.begin() + static_cast<std::size_t>(n) * os.c * plane);
    std::copy(b.data().begin() + n * bs.c * plane,
              b.data().begin() + (n + 1) * bs.c * plane,
              out.begin() + (static_cast<std::size_t>(n) * os.c + as.c) * plane);
  }
  auto ai = a.impl(), bi = b.impl();
  return record<T>(OpKind::concat_channels, os, std::move(out), {a, b},
                   [ai, bi, as, bs, os, plane](const std::vector<T>& g) {
                     auto* ga = detail::grad_buffer(ai);
                     auto* gb = detail::grad_buffer(bi);
                     for (int n = 0; n < as.b; ++n) {
                       const T* gp = g.data() + static_cast<std::size_t>(n) * os.c * plane;
                       if (ga) {
                         T* p = ga->data() + static_cast<std::size_t>(n) * as.c * plane;
                         for (std::size_t i = 0; i < as.c * plane; ++i) p[i] += gp[i];
                       }
                       if (gb) {
                         T* p = gb->data() + static_cast<std::size_t>(n) * bs.c * plane;
                         const T* gq = gp + static_cast<std::size_t>(as.c) * plane;
                         for (std::size_t i = 0; i < bs.c * plane; ++i) p[i] += gq[i];
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Reverse pass

template <class T>
void backward(const TensorT<T>& loss) {
  if (!loss.defined() || !(loss.shape() == Shape{1, 1, 1, 1})) {
    throw ShapeError("backward: loss must be a scalar (1,1,1,1) tensor");
  }
  auto root = loss.impl();
  if (!root->requires_grad) return;

  // post-order DFS; reversed it yields consumers before producers
  std::vector<TensorImplT<T>*> order;
  std::unordered_set<TensorImplT<T>*> visited;
  std::vector<std::pair<TensorImplT<T>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, idx] = stack.back();
    const std::size_t n_parents = impl->node ? impl->node->parents.size() : 0;
    if (idx < n_parents) {
      TensorImplT<T>* p = impl->node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  root->grad.assign(1, T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImplT<T>* impl = *it;
    if (impl->node && !impl->grad.empty()) {
      impl->node->backward_fn(impl->grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Non-recorded utilities

/// Stacks (1,c,h,w) samples into a (n,c,h,w) leaf.
template <class T>
TensorT<T> stack_batch(const std::vector<TensorT<T>>& samples) {
  if (samples.empty()) throw ShapeError("stack_batch: empty list");
  Shape s0 = samples.front().shape();
  if (s0.b != 1) throw ShapeError("stack_batch: samples must have batch 1");
  std::vector<T> out;
  out.reserve(samples.size() * samples.front().numel());
  for (const auto& t : samples) {
    if (!(t.shape() == s0)) throw ShapeError("stack_batch: dims mismatch");
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return TensorT<T>::from_data(
      Shape{static_cast<int>(samples.size()), s0.c, s0.h, s0.w}, std::move(out));
}

}  // namespace scn
