#pragma once

// Differentiable operations over Var. Feature maps are (batch, channels, height,
// width); spatial maps are (batch, height, width).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include "afss/autograd.hpp"
#include "afss/tensor.hpp"

namespace afss {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowMatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstRowMatMap = Eigen::Map<const RowMat<T>>;

namespace detail {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_to_string(a.shape()) + " vs " +
                     shape_to_string(b.shape()));
  }
}

template <typename T, typename Fwd, typename Deriv>
Var<T> unary(const Var<T>& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.value();
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_var<T>(std::move(out), {x}, [x, deriv](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    auto& g = x.grad_buffer();
    const auto& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * deriv(xv[i]);
  });
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_var<T>(std::move(out), {a, b}, [a, b](Node<T>& self) mutable {
    if (a.requires_grad()) accumulate(*a.node(), self.grad);
    if (b.requires_grad()) accumulate(*b.node(), self.grad);
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_var<T>(std::move(out), {a, b}, [a, b](Node<T>& self) mutable {
    if (a.requires_grad()) {
      auto& g = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b.value()[i];
    }
    if (b.requires_grad()) {
      auto& g = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a.value()[i];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

// min(6, max(0, x)); gradient is 1 strictly inside (0, 6) and 0 at or beyond the kinks.
template <typename T>
Var<T> relu6(const Var<T>& x) {
  return detail::unary(
      x, [](T v) { return std::min(T(6), std::max(T(0), v)); },
      [](T v) { return (v > T(0) && v < T(6)) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::min(T(6), std::max(T(0), x[i]));
  return out;
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return make_var<T>(std::move(out), {x}, [x](Node<T>& self) mutable {
    if (x.requires_grad()) accumulate(*x.node(), self.grad);
  });
}

// Sum of every element, as a shape-{1} value.
template <typename T>
Var<T> sum_all(const Var<T>& x) {
  T s = 0;
  for (T v : x.value().values()) s += v;
  return make_var<T>(Tensor<T>({1}, std::vector<T>{s}), {x}, [x](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    auto& g = x.grad_buffer();
    for (auto& v : g.values()) v += self.grad[0];
  });
}

// Divides each slice along `axis` by max(norm, eps). Zero slices stay zero.
template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, std::size_t axis, T eps = default_eps<T>()) {
  require_finite(x, "l2_normalize");
  if (axis >= x.rank()) throw ShapeError("l2_normalize: axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1, len = s[axis];
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Tensor<T> out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T sq = 0;
      for (std::size_t j = 0; j < len; ++j) sq += x[base + j * inner] * x[base + j * inner];
      const T denom = std::max(std::sqrt(sq), eps);
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = x[base + j * inner] / denom;
    }
  }
  return out;
}

template <typename T>
Var<T> l2_normalize(const Var<T>& x, std::size_t axis, T eps = default_eps<T>()) {
  Tensor<T> out = l2_normalize(x.value(), axis, eps);
  return make_var<T>(std::move(out), {x}, [x, axis, eps](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    const auto& xv = x.value();
    const auto& y = self.value;
    auto& g = x.grad_buffer();
    const auto& s = xv.shape();
    std::size_t outer = 1, inner = 1, len = s[axis];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T sq = 0, yg = 0;
        for (std::size_t j = 0; j < len; ++j) {
          const std::size_t k = base + j * inner;
          sq += xv[k] * xv[k];
          yg += y[k] * self.grad[k];
        }
        const T norm = std::sqrt(sq);
        if (norm > eps) {
          for (std::size_t j = 0; j < len; ++j) {
            const std::size_t k = base + j * inner;
            g[k] += (self.grad[k] - y[k] * yg) / norm;
          }
        } else {
          for (std::size_t j = 0; j < len; ++j) g[base + j * inner] += self.grad[base + j * inner] / eps;
        }
      }
    }
  });
}

// Per-position dot product over channels of F (N,C,H,W) with p (C) -> (N,H,W).
template <typename T>
Var<T> channel_dot(const Var<T>& f, const Var<T>& p) {
  require_rank(f.value(), 4, "channel_dot");
  const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  require_shape(p.value(), {c}, "channel_dot prototype");
  Tensor<T> out({n, f.dim(2), f.dim(3)});
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T pv = p.value()[ch];
      const T* src = f.value().data() + (b * c + ch) * hw;
      T* dst = out.data() + b * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i] * pv;
    }
  }
  return make_var<T>(std::move(out), {f, p}, [f, p, n, c, hw](Node<T>& self) mutable {
    if (f.requires_grad()) {
      auto& g = f.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T pv = p.value()[ch];
          T* dst = g.data() + (b * c + ch) * hw;
          const T* up = self.grad.data() + b * hw;
          for (std::size_t i = 0; i < hw; ++i) dst[i] += up[i] * pv;
        }
    }
    if (p.requires_grad()) {
      auto& g = p.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* src = f.value().data() + (b * c + ch) * hw;
          const T* up = self.grad.data() + b * hw;
          T acc = 0;
          for (std::size_t i = 0; i < hw; ++i) acc += up[i] * src[i];
          g[ch] += acc;
        }
    }
  });
}

// F (N,C,H,W) scaled at each position by E (N,H,W), broadcast over channels.
template <typename T>
Var<T> spatial_mul(const Var<T>& f, const Var<T>& e) {
  require_rank(f.value(), 4, "spatial_mul");
  const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  require_shape(e.value(), {n, f.dim(2), f.dim(3)}, "spatial_mul map");
  Tensor<T> out(f.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = f.value().data() + (b * c + ch) * hw;
      const T* m = e.value().data() + b * hw;
      T* dst = out.data() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] * m[i];
    }
  return make_var<T>(std::move(out), {f, e}, [f, e, n, c, hw](Node<T>& self) mutable {
    if (f.requires_grad()) {
      auto& g = f.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* m = e.value().data() + b * hw;
          const T* up = self.grad.data() + (b * c + ch) * hw;
          T* dst = g.data() + (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i) dst[i] += up[i] * m[i];
        }
    }
    if (e.requires_grad()) {
      auto& g = e.grad_buffer();
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* src = f.value().data() + (b * c + ch) * hw;
          const T* up = self.grad.data() + (b * c + ch) * hw;
          T* dst = g.data() + b * hw;
          for (std::size_t i = 0; i < hw; ++i) dst[i] += up[i] * src[i];
        }
    }
  });
}

// Per-position channel projection: out[n,:,y,x] = F[n,:,y,x] . W with W (C, K).
template <typename T>
Var<T> channel_project(const Var<T>& f, const Var<T>& w) {
  require_rank(f.value(), 4, "channel_project");
  require_rank(w.value(), 2, "channel_project weight");
  const std::size_t n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3), k = w.dim(1);
  if (w.dim(0) != c) {
    throw ShapeError("channel_project: feature has " + std::to_string(c) + " channels, weight expects " +
                     std::to_string(w.dim(0)));
  }
  Tensor<T> out({n, k, f.dim(2), f.dim(3)});
  ConstRowMatMap<T> wm(w.value().data(), c, k);
  for (std::size_t b = 0; b < n; ++b) {
    ConstRowMatMap<T> fm(f.value().data() + b * c * hw, c, hw);
    RowMatMap<T> om(out.data() + b * k * hw, k, hw);
    om.noalias() = wm.transpose() * fm;
  }
  return make_var<T>(std::move(out), {f, w}, [f, w, n, c, hw, k](Node<T>& self) mutable {
    ConstRowMatMap<T> wm(w.value().data(), c, k);
    if (f.requires_grad()) {
      auto& g = f.grad_buffer();
      for (std::size_t b = 0; b < n; ++b) {
        ConstRowMatMap<T> up(self.grad.data() + b * k * hw, k, hw);
        RowMatMap<T> gm(g.data() + b * c * hw, c, hw);
        gm.noalias() += wm * up;
      }
    }
    if (w.requires_grad()) {
      auto& g = w.grad_buffer();
      RowMatMap<T> gm(g.data(), c, k);
      for (std::size_t b = 0; b < n; ++b) {
        ConstRowMatMap<T> fm(f.value().data() + b * c * hw, c, hw);
        ConstRowMatMap<T> up(self.grad.data() + b * k * hw, k, hw);
        gm.noalias() += fm * up.transpose();
      }
    }
  });
}

namespace detail {

// (C,H,W) -> (C*k*k, H*W) for stride-1 "same" convolution with odd kernel k.
template <typename T>
void im2col(const T* src, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* col) {
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* row = col + ((ch * k + ky) * k + kx) * h * w;
        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < H; ++y) {
          const long sy = y + dy;
          T* dst = row + y * W;
          if (sy < 0 || sy >= H) {
            std::fill(dst, dst + W, T(0));
            continue;
          }
          const T* s = src + (ch * h + sy) * w;
          const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
          for (long x = 0; x < x0; ++x) dst[x] = T(0);
          for (long x = x0; x < x1; ++x) dst[x] = s[x + dx];
          for (long x = std::max(x1, x0); x < W; ++x) dst[x] = T(0);
        }
      }
}

template <typename T>
void col2im_add(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t k, T* dst) {
  const long pad = static_cast<long>(k / 2);
  const long H = static_cast<long>(h), W = static_cast<long>(w);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* row = col + ((ch * k + ky) * k + kx) * h * w;
        const long dy = static_cast<long>(ky) - pad, dx = static_cast<long>(kx) - pad;
        for (long y = 0; y < H; ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= H) continue;
          T* d = dst + (ch * h + sy) * w;
          const T* s = row + y * W;
          const long x0 = std::max(0L, -dx), x1 = std::min(W, W - dx);
          for (long x = x0; x < x1; ++x) d[x + dx] += s[x];
        }
      }
}

}  // namespace detail

// Stride-1 convolution with "same" zero padding. weight (Cout, Cin, k, k), bias (Cout).
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.value(), 4, "conv2d input");
  require_rank(weight.value(), 4, "conv2d weight");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t co = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c || weight.dim(3) != k || k % 2 == 0) {
    throw ShapeError("conv2d: weight " + shape_to_string(weight.shape()) + " incompatible with input " +
                     shape_to_string(x.shape()));
  }
  require_shape(bias.value(), {co}, "conv2d bias");
  const std::size_t hw = h * w, ck = c * k * k;
  Tensor<T> out({n, co, h, w});
  AlignedVector<T> col(ck * hw);
  ConstRowMatMap<T> wm(weight.value().data(), co, ck);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.value().data(), co);
  for (std::size_t b = 0; b < n; ++b) {
    detail::im2col(x.value().data() + b * c * hw, c, h, w, k, col.data());
    RowMatMap<T> om(out.data() + b * co * hw, co, hw);
    om.noalias() = wm * ConstRowMatMap<T>(col.data(), ck, hw);
    om.colwise() += bv;
  }
  return make_var<T>(std::move(out), {x, weight, bias},
                     [x, weight, bias, n, c, h, w, co, k, hw, ck](Node<T>& self) mutable {
                       AlignedVector<T> col(ck * hw);
                       ConstRowMatMap<T> wm(weight.value().data(), co, ck);
                       for (std::size_t b = 0; b < n; ++b) {
                         ConstRowMatMap<T> up(self.grad.data() + b * co * hw, co, hw);
                         if (weight.requires_grad()) {
                           detail::im2col(x.value().data() + b * c * hw, c, h, w, k, col.data());
                           RowMatMap<T> gw(weight.grad_buffer().data(), co, ck);
                           gw.noalias() += up * ConstRowMatMap<T>(col.data(), ck, hw).transpose();
                         }
                         if (bias.requires_grad()) {
                           auto& gb = bias.grad_buffer();
                           for (std::size_t o = 0; o < co; ++o) gb[o] += up.row(o).sum();
                         }
                         if (x.requires_grad()) {
                           RowMatMap<T> cm(col.data(), ck, hw);
                           cm.noalias() = wm.transpose() * up;
                           detail::col2im_add(col.data(), c, h, w, k, x.grad_buffer().data() + b * c * hw);
                         }
                       }
                     });
}

// 2x2 average pooling, stride 2. Odd trailing rows/columns are dropped.
template <typename T>
Var<T> avg_pool2(const Var<T>& x) {
  require_rank(x.value(), 4, "avg_pool2");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          out.at(b, ch, y, xx) = T(0.25) * (xv.at(b, ch, 2 * y, 2 * xx) + xv.at(b, ch, 2 * y, 2 * xx + 1) +
                                            xv.at(b, ch, 2 * y + 1, 2 * xx) + xv.at(b, ch, 2 * y + 1, 2 * xx + 1));
  return make_var<T>(std::move(out), {x}, [x, n, c, oh, ow](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    auto& g = x.grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y)
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const T v = T(0.25) * self.grad.at(b, ch, y, xx);
            g.at(b, ch, 2 * y, 2 * xx) += v;
            g.at(b, ch, 2 * y, 2 * xx + 1) += v;
            g.at(b, ch, 2 * y + 1, 2 * xx) += v;
            g.at(b, ch, 2 * y + 1, 2 * xx + 1) += v;
          }
  });
}

// Concatenate (N,Ci,H,W) blocks along the channel axis.
template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const std::size_t n = parts[0].dim(0), h = parts[0].dim(2), w = parts[0].dim(3), hw = h * w;
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank(p.value(), 4, "concat_channels");
    if (p.dim(0) != n || p.dim(2) != h || p.dim(3) != w) throw ShapeError("concat_channels: mismatched blocks");
    total += p.dim(1);
  }
  Tensor<T> out({n, total, h, w});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.dim(1);
    for (std::size_t b = 0; b < n; ++b)
      std::copy_n(p.value().data() + b * c * hw, c * hw, out.data() + (b * total + off) * hw);
    off += c;
  }
  return make_var<T>(std::move(out), parts, [parts, n, total, hw](Node<T>& self) mutable {
    std::size_t off = 0;
    for (auto& p : parts) {
      const std::size_t c = p.dim(1);
      if (p.requires_grad()) {
        auto& g = p.grad_buffer();
        for (std::size_t b = 0; b < n; ++b) {
          const T* src = self.grad.data() + (b * total + off) * hw;
          T* dst = g.data() + b * c * hw;
          for (std::size_t i = 0; i < c * hw; ++i) dst[i] += src[i];
        }
      }
      off += c;
    }
  });
}

// Rows [start, start+count) of the leading (batch) axis.
template <typename T>
Var<T> slice_batch(const Var<T>& x, std::size_t start, std::size_t count) {
  if (start + count > x.dim(0)) throw ShapeError("slice_batch: range out of bounds");
  Shape s = x.shape();
  const std::size_t per = x.value().size() / s[0];
  s[0] = count;
  Tensor<T> out(s);
  std::copy_n(x.value().data() + start * per, count * per, out.data());
  return make_var<T>(std::move(out), {x}, [x, start, count, per](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    T* dst = x.grad_buffer().data() + start * per;
    for (std::size_t i = 0; i < count * per; ++i) dst[i] += self.grad[i];
  });
}

// Stack blocks along the leading (batch) axis.
template <typename T>
Var<T> concat_batch(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_batch: no inputs");
  Shape s = parts[0].shape();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != s.size() || !std::equal(ps.begin() + 1, ps.end(), s.begin() + 1)) {
      throw ShapeError("concat_batch: mismatched blocks");
    }
    rows += ps[0];
  }
  s[0] = rows;
  Tensor<T> out(s);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off);
    off += p.value().size();
  }
  return make_var<T>(std::move(out), parts, [parts](Node<T>& self) mutable {
    std::size_t off = 0;
    for (auto& p : parts) {
      if (p.requires_grad()) {
        auto& g = p.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
      }
      off += p.value().size();
    }
  });
}

// p (C) repeated at every position of an (n, C, h, w) block.
template <typename T>
Var<T> broadcast_vector(const Var<T>& p, std::size_t n, std::size_t h, std::size_t w) {
  require_rank(p.value(), 1, "broadcast_vector");
  const std::size_t c = p.dim(0), hw = h * w;
  Tensor<T> out({n, c, h, w});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::fill_n(out.data() + (b * c + ch) * hw, hw, p.value()[ch]);
  return make_var<T>(std::move(out), {p}, [p, n, c, hw](Node<T>& self) mutable {
    if (!p.requires_grad()) return;
    auto& g = p.grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = self.grad.data() + (b * c + ch) * hw;
        T acc = 0;
        for (std::size_t i = 0; i < hw; ++i) acc += src[i];
        g[ch] += acc;
      }
  });
}

// Weighted spatial mean of F (K,C,H,W) under constant weights (K,H,W), pooled over
// all K blocks. Returns the zero vector when the weights sum to zero.
template <typename T>
Var<T> weighted_mean(const Var<T>& f, const Tensor<T>& weights) {
  require_rank(f.value(), 4, "weighted_mean");
  const std::size_t k = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  require_shape(weights, {k, f.dim(2), f.dim(3)}, "weighted_mean weights");
  T total = 0;
  for (T v : weights.values()) total += v;
  Tensor<T> out({c});
  if (total <= T(0)) return Var<T>::constant(std::move(out));
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = f.value().data() + (b * c + ch) * hw;
      const T* m = weights.data() + b * hw;
      T acc = 0;
      for (std::size_t i = 0; i < hw; ++i) acc += src[i] * m[i];
      out[ch] += acc / total;
    }
  return make_var<T>(std::move(out), {f}, [f, weights, k, c, hw, total](Node<T>& self) mutable {
    if (!f.requires_grad()) return;
    auto& g = f.grad_buffer();
    for (std::size_t b = 0; b < k; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T up = self.grad[ch] / total;
        const T* m = weights.data() + b * hw;
        T* dst = g.data() + (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) dst[i] += up * m[i];
      }
  });
}

// For each query position, the maximum dot product against support positions
// whose mask is set. Inputs are expected to be channel-normalised, so this is
// a dense cosine correlation. query (1,C,H,W), support (K,C,H,W), mask (K,H,W).
template <typename T>
Var<T> max_correlation(const Var<T>& query, const Var<T>& support, const Tensor<T>& mask) {
  require_rank(query.value(), 4, "max_correlation query");
  require_rank(support.value(), 4, "max_correlation support");
  const std::size_t c = query.dim(1), hq = query.dim(2), wq = query.dim(3), qn = hq * wq;
  const std::size_t k = support.dim(0), sn = support.dim(2) * support.dim(3);
  if (query.dim(0) != 1 || support.dim(1) != c) throw ShapeError("max_correlation: incompatible blocks");
  require_shape(mask, {k, support.dim(2), support.dim(3)}, "max_correlation mask");

  // gather masked support columns: (C, M)
  std::vector<std::size_t> picked;
  for (std::size_t b = 0; b < k; ++b)
    for (std::size_t i = 0; i < sn; ++i)
      if (mask[b * sn + i] > T(0.5)) picked.push_back(b * sn + i);
  Tensor<T> out({1, 1, hq, wq});
  if (picked.empty()) return Var<T>::constant(std::move(out));
  const std::size_t m = picked.size();
  RowMat<T> sm(c, m);
  for (std::size_t j = 0; j < m; ++j) {
    const std::size_t b = picked[j] / sn, i = picked[j] % sn;
    for (std::size_t ch = 0; ch < c; ++ch) sm(ch, j) = support.value()[(b * c + ch) * sn + i];
  }
  ConstRowMatMap<T> qm(query.value().data(), c, qn);
  RowMat<T> corr = qm.transpose() * sm;  // (qn, M)
  std::vector<std::size_t> arg(qn);
  for (std::size_t i = 0; i < qn; ++i) {
    Eigen::Index best = 0;
    out[i] = corr.row(i).maxCoeff(&best);
    arg[i] = picked[static_cast<std::size_t>(best)];
  }
  return make_var<T>(std::move(out), {query, support},
                     [query, support, arg, c, qn, sn](Node<T>& self) mutable {
                       for (std::size_t i = 0; i < qn; ++i) {
                         const T up = self.grad[i];
                         if (up == T(0)) continue;
                         const std::size_t b = arg[i] / sn, j = arg[i] % sn;
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           if (query.requires_grad())
                             query.grad_buffer()[ch * qn + i] += up * support.value()[(b * c + ch) * sn + j];
                           if (support.requires_grad())
                             support.grad_buffer()[(b * c + ch) * sn + j] += up * query.value()[ch * qn + i];
                         }
                       }
                     });
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double w1;
};

// Half-pixel-centred source taps for integer-factor upsampling.
inline std::vector<LerpTap> upsample_taps(std::size_t src, std::size_t factor) {
  std::vector<LerpTap> taps(src * factor);
  for (std::size_t d = 0; d < taps.size(); ++d) {
    double s = (static_cast<double>(d) + 0.5) / static_cast<double>(factor) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(src - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, src - 1);
    taps[d] = {i0, i1, s - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

// Bilinear upsampling by an integer factor.
template <typename T>
Var<T> upsample_bilinear(const Var<T>& x, std::size_t factor) {
  require_rank(x.value(), 4, "upsample_bilinear");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  auto ty = detail::upsample_taps(h, factor), tx = detail::upsample_taps(w, factor);
  Tensor<T> out({n, c, oh, ow});
  const auto& xv = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < oh; ++y) {
        const T wy = static_cast<T>(ty[y].w1);
        for (std::size_t xx = 0; xx < ow; ++xx) {
          const T wx = static_cast<T>(tx[xx].w1);
          const T top = xv.at(b, ch, ty[y].i0, tx[xx].i0) * (1 - wx) + xv.at(b, ch, ty[y].i0, tx[xx].i1) * wx;
          const T bot = xv.at(b, ch, ty[y].i1, tx[xx].i0) * (1 - wx) + xv.at(b, ch, ty[y].i1, tx[xx].i1) * wx;
          out.at(b, ch, y, xx) = top * (1 - wy) + bot * wy;
        }
      }
  return make_var<T>(std::move(out), {x}, [x, ty, tx, n, c, oh, ow](Node<T>& self) mutable {
    if (!x.requires_grad()) return;
    auto& g = x.grad_buffer();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < oh; ++y) {
          const T wy = static_cast<T>(ty[y].w1);
          for (std::size_t xx = 0; xx < ow; ++xx) {
            const T wx = static_cast<T>(tx[xx].w1);
            const T up = self.grad.at(b, ch, y, xx);
            g.at(b, ch, ty[y].i0, tx[xx].i0) += up * (1 - wy) * (1 - wx);
            g.at(b, ch, ty[y].i0, tx[xx].i1) += up * (1 - wy) * wx;
            g.at(b, ch, ty[y].i1, tx[xx].i0) += up * wy * (1 - wx);
            g.at(b, ch, ty[y].i1, tx[xx].i1) += up * wy * wx;
          }
        }
  });
}

// Mean per-pixel cross-entropy of 2-way logits (1,2,H,W) against a binary
// target (H,W). Returns a shape-{1} loss.
template <typename T>
Var<T> binary_cross_entropy_2way(const Var<T>& logits, const Tensor<T>& target) {
  require_rank(logits.value(), 4, "cross_entropy logits");
  if (logits.dim(0) != 1 || logits.dim(1) != 2) throw ShapeError("cross_entropy: expected (1,2,H,W) logits");
  const std::size_t hw = logits.dim(2) * logits.dim(3);
  require_shape(target, {logits.dim(2), logits.dim(3)}, "cross_entropy target");
  const T* bg = logits.value().data();
  const T* fg = bg + hw;
  T loss = 0;
  std::vector<T> p_fg(hw);
  for (std::size_t i = 0; i < hw; ++i) {
    const T mx = std::max(bg[i], fg[i]);
    const T lse = mx + std::log(std::exp(bg[i] - mx) + std::exp(fg[i] - mx));
    loss += (target[i] > T(0.5) ? lse - fg[i] : lse - bg[i]);
    p_fg[i] = std::exp(fg[i] - lse);
  }
  loss /= static_cast<T>(hw);
  return make_var<T>(Tensor<T>({1}, std::vector<T>{loss}), {logits},
                     [logits, target, p_fg, hw](Node<T>& self) mutable {
                       if (!logits.requires_grad()) return;
                       auto& g = logits.grad_buffer();
                       const T s = self.grad[0] / static_cast<T>(hw);
                       for (std::size_t i = 0; i < hw; ++i) {
                         const T y = target[i] > T(0.5) ? T(1) : T(0);
                         g[i] += s * ((1 - p_fg[i]) - (1 - y));
                         g[hw + i] += s * (p_fg[i] - y);
                       }
                     });
}

// Foreground probability (H,W) from 2-way logits (1,2,H,W).
template <typename T>
Tensor<T> foreground_probability(const Tensor<T>& logits) {
  const std::size_t h = logits.dim(2), w = logits.dim(3), hw = h * w;
  Tensor<T> out({h, w});
  for (std::size_t i = 0; i < hw; ++i) {
    const T d = logits[i] - logits[hw + i];  // bg - fg
    out[i] = T(1) / (T(1) + std::exp(d));
  }
  return out;
}

}  // namespace afss
