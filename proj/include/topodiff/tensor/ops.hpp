#pragma once

// Differentiable tensor primitives. Broadcasting is limited to scalars,
// trailing-shape bias terms and the per-sample / per-channel forms spelled
// out below.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "topodiff/tensor/tensor.hpp"

namespace topodiff {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

template <typename T>
bool wants_grad(const std::shared_ptr<Node<T>>& n) {
  return n->requires_grad;
}

// Elementwise unary op; dydx receives (x, y) and returns dy/dx.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, const char* name, F f, DF dydx) {
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, name, [xn, dydx](Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      xn->grad[i] += self.grad[i] * dydx(xn->data[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "add",
                                [an, bn](detail::Node<T>& self) {
                                  for (auto* n : {an.get(), bn.get()}) {
                                    if (!n->requires_grad) continue;
                                    n->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      n->grad[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "sub",
                                [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                    an->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      an->grad[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    bn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      bn->grad[i] -= self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "mul",
                                [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                    an->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      an->grad[i] += self.grad[i] * bn->data[i];
                                  }
                                  if (bn->requires_grad) {
                                    bn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      bn->grad[i] += self.grad[i] * an->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  auto an = a.node(), bn = b.node();
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "div",
                                [an, bn](detail::Node<T>& self) {
                                  if (an->requires_grad) {
                                    an->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      an->grad[i] += self.grad[i] / bn->data[i];
                                  }
                                  if (bn->requires_grad) {
                                    bn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      bn->grad[i] -= self.grad[i] * self.data[i] / bn->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "scale", [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
  return detail::unary(
      x, "add_scalar", [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
  return scale(x, T(-1));
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::unary(
      x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::unary(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
  return detail::unary(
      x, "gelu", [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <typename T>
T stable_sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

// log(1 + exp(v)) without overflow.
template <typename T>
T stable_softplus(T v) {
  return std::max(v, T(0)) + std::log1p(std::exp(-std::abs(v)));
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, "sigmoid", [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, "silu", [](T v) { return v * stable_sigmoid(v); },
      [](T v, T) {
        const T s = stable_sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, "softplus", [](T v) { return stable_softplus(v); },
      [](T v, T) { return stable_sigmoid(v); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return detail::unary(
      x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
  return detail::unary(
      x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// Gradient passes only where lo < x < hi.
template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  return detail::unary(
      x, "clamp", [=](T v) { return std::clamp(v, lo, hi); },
      [=](T v, T) { return (v > lo && v < hi) ? T(1) : T(0); });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T acc = 0;
  for (T v : x.data()) acc += v;
  auto xn = x.node();
  return detail::make_result<T>({1}, {acc}, {&x}, "sum", [xn](detail::Node<T>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (auto& g : xn->grad) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

// Sums the last axis: [..., K] -> [...].
template <typename T>
Tensor<T> sum_last(const Tensor<T>& x) {
  if (x.dim() < 2) throw DimensionError("sum_last needs rank >= 2, got " + shape_str(x.shape()));
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < k; ++j) out[r] += x[r * k + j];
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  auto xn = x.node();
  return detail::make_result<T>(shape, std::move(out), {&x}, "sum_last",
                                [xn, k](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t r = 0; r < self.grad.size(); ++r)
                                    for (std::size_t j = 0; j < k; ++j)
                                      xn->grad[r * k + j] += self.grad[r];
                                });
}

// ---------------------------------------------------------------- broadcasting

// x + b where b's shape equals the trailing dims of x.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const std::size_t n = b.numel();
  if (b.dim() > x.dim() || !std::equal(b.shape().begin(), b.shape().end(), x.shape().end() - b.dim())) {
    throw DimensionError("add_bias: bias " + shape_str(b.shape()) + " is not a trailing shape of " +
                         shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + b[i % n];
  auto xn = x.node(), bn = b.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &b}, "add_bias",
                                [xn, bn, n](detail::Node<T>& self) {
                                  if (xn->requires_grad) {
                                    xn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      xn->grad[i] += self.grad[i];
                                  }
                                  if (bn->requires_grad) {
                                    bn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      bn->grad[i % n] += self.grad[i];
                                  }
                                });
}

// x * g where g's shape equals the trailing dims of x.
template <typename T>
Tensor<T> mul_bias(const Tensor<T>& x, const Tensor<T>& g) {
  const std::size_t n = g.numel();
  if (g.dim() > x.dim() || !std::equal(g.shape().begin(), g.shape().end(), x.shape().end() - g.dim())) {
    throw DimensionError("mul_bias: scale " + shape_str(g.shape()) +
                         " is not a trailing shape of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * g[i % n];
  auto xn = x.node(), gn = g.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &g}, "mul_bias",
                                [xn, gn, n](detail::Node<T>& self) {
                                  if (xn->requires_grad) {
                                    xn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      xn->grad[i] += self.grad[i] * gn->data[i % n];
                                  }
                                  if (gn->requires_grad) {
                                    gn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      gn->grad[i % n] += self.grad[i] * xn->data[i];
                                  }
                                });
}

// x [N, C, S...] + e [N, C], broadcast over the spatial tail.
template <typename T>
Tensor<T> add_channelwise(const Tensor<T>& x, const Tensor<T>& e) {
  if (x.dim() < 2 || e.dim() != 2 || e.size(0) != x.size(0) || e.size(1) != x.size(1)) {
    throw DimensionError("add_channelwise: " + shape_str(x.shape()) + " vs " + shape_str(e.shape()));
  }
  const std::size_t nc = e.numel();
  const std::size_t inner = x.numel() / nc;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + e[i / inner];
  auto xn = x.node(), en = e.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &e}, "add_channelwise",
                                [xn, en, inner](detail::Node<T>& self) {
                                  if (xn->requires_grad) {
                                    xn->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      xn->grad[i] += self.grad[i];
                                  }
                                  if (en->requires_grad) {
                                    en->ensure_grad();
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      en->grad[i / inner] += self.grad[i];
                                  }
                                });
}

// x [N, C, S...] * scale[C] + shift[C].
template <typename T>
Tensor<T> affine_channels(const Tensor<T>& x, const Tensor<T>& scale_c, const Tensor<T>& shift_c) {
  if (x.dim() < 2 || scale_c.numel() != x.size(1) || shift_c.numel() != x.size(1)) {
    throw DimensionError("affine_channels: " + shape_str(x.shape()) + " vs " +
                         shape_str(scale_c.shape()));
  }
  const std::size_t n = x.size(0), c = x.size(1);
  const std::size_t inner = x.numel() / (n * c);
  std::vector<T> out(x.numel());
  {
    const T* xd = x.data().data();
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T a = scale_c[ch], b = shift_c[ch];
        const std::size_t base = (s * c + ch) * inner;
        for (std::size_t j = 0; j < inner; ++j) out[base + j] = xd[base + j] * a + b;
      }
  }
  auto xn = x.node(), sn = scale_c.node(), bn = shift_c.node();
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &scale_c, &shift_c}, "affine_channels",
      [xn, sn, bn, n, c, inner](detail::Node<T>& self) {
        if (xn->requires_grad) xn->ensure_grad();
        if (sn->requires_grad) sn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (s * c + ch) * inner;
            const T* g = self.grad.data() + base;
            T gsum = 0, gx = 0;
            for (std::size_t j = 0; j < inner; ++j) {
              gsum += g[j];
              gx += g[j] * xn->data[base + j];
            }
            if (xn->requires_grad) {
              const T a = sn->data[ch];
              T* dx = xn->grad.data() + base;
              for (std::size_t j = 0; j < inner; ++j) dx[j] += g[j] * a;
            }
            if (sn->requires_grad) sn->grad[ch] += gx;
            if (bn->requires_grad) bn->grad[ch] += gsum;
          }
      });
}

// Feature-wise linear modulation: x [N, P, D] * gamma [N, D] + beta [N, D],
// broadcast over the P tokens of each sample.
template <typename T>
Tensor<T> film(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.dim() != 3 || gamma.shape() != Shape{x.size(0), x.size(2)} || beta.shape() != gamma.shape()) {
    throw DimensionError("film: tokens " + shape_str(x.shape()) + ", gamma " +
                         shape_str(gamma.shape()) + ", beta " + shape_str(beta.shape()));
  }
  const std::size_t p = x.size(1), d = x.size(2);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t n = i / (p * d), k = i % d;
    out[i] = gamma[n * d + k] * x[i] + beta[n * d + k];
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "film",
                                [xn, gn, bn, p, d](detail::Node<T>& self) {
                                  if (xn->requires_grad) xn->ensure_grad();
                                  if (gn->requires_grad) gn->ensure_grad();
                                  if (bn->requires_grad) bn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                    const std::size_t j = (i / (p * d)) * d + i % d;
                                    const T g = self.grad[i];
                                    if (xn->requires_grad) xn->grad[i] += g * gn->data[j];
                                    if (gn->requires_grad) gn->grad[j] += g * xn->data[i];
                                    if (bn->requires_grad) bn->grad[j] += g;
                                  }
                                });
}

// Scales sample n of x [N, ...] by the constant coeffs[n].
template <typename T>
Tensor<T> scale_per_sample(const Tensor<T>& x, const std::vector<T>& coeffs) {
  if (x.dim() < 1 || coeffs.size() != x.size(0)) {
    throw DimensionError("scale_per_sample: " + std::to_string(coeffs.size()) +
                         " coefficients for " + shape_str(x.shape()));
  }
  const std::size_t inner = x.numel() / x.size(0);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * coeffs[i / inner];
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "scale_per_sample",
                                [xn, coeffs, inner](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    xn->grad[i] += self.grad[i] * coeffs[i / inner];
                                });
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel_of(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), x.values(), {&x}, "reshape",
                                [xn](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    xn->grad[i] += self.grad[i];
                                });
}

// Output axis i is input axis axes[i].
template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.dim();
  if (axes.size() != rank) throw DimensionError("permute: axes rank mismatch for " + shape_str(x.shape()));
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.size(i);
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  std::vector<bool> seen(rank, false);
  for (std::size_t i = 0; i < rank; ++i) {
    if (axes[i] >= rank || seen[axes[i]]) throw DimensionError("permute: invalid axis list");
    seen[axes[i]] = true;
    out_shape[i] = x.size(axes[i]);
    src_strides[i] = in_strides[axes[i]];
  }
  // map[out_index] = in_index
  std::vector<std::size_t> map(x.numel());
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t o = 0; o < map.size(); ++o) {
    map[o] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += src_strides[ax];
      if (idx[ax] < out_shape[ax]) break;
      src -= src_strides[ax] * out_shape[ax];
      idx[ax] = 0;
    }
  }
  std::vector<T> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = in[map[o]];
  auto xn = x.node();
  return detail::make_result<T>(std::move(out_shape), std::move(out), {&x}, "permute",
                                [xn, map = std::move(map)](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t o = 0; o < self.grad.size(); ++o)
                                    xn->grad[map[o]] += self.grad[o];
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  if (x.dim() != 2) throw DimensionError("transpose needs a matrix, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& ref = parts[0].shape();
  if (axis >= ref.size()) throw DimensionError("concat axis out of range for " + shape_str(ref));
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != ref.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
  std::vector<std::size_t> widths;
  for (const auto& p : parts) widths.push_back(p.size(axis) * inner);
  const std::size_t row = out_shape[axis] * inner;
  std::vector<T> out(numel_of(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto in = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(in.begin() + o * widths[k], widths[k], out.begin() + o * row + offset);
    offset += widths[k];
  }
  std::vector<std::shared_ptr<detail::Node<T>>> nodes;
  for (const auto& p : parts) nodes.push_back(p.node());
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), parts, "concat",
      [nodes, widths, outer, row](detail::Node<T>& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < nodes.size(); ++k) {
          auto& n = *nodes[k];
          if (n.requires_grad) {
            n.ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
              for (std::size_t j = 0; j < widths[k]; ++j) n.grad[o * widths[k] + j] += self.grad[o * row + off + j];
          }
          off += widths[k];
        }
      });
}

// Elements [begin, end) along axis.
template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (axis >= x.dim() || begin >= end || end > x.size(axis)) {
    throw IndexError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.size(i);
  const std::size_t src_row = x.size(axis) * inner;
  const std::size_t width = (end - begin) * inner;
  const std::size_t start = begin * inner;
  Shape shape = x.shape();
  shape[axis] = end - begin;
  std::vector<T> out(outer * width);
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(in.begin() + o * src_row + start, width, out.begin() + o * width);
  auto xn = x.node();
  return detail::make_result<T>(std::move(shape), std::move(out), {&x}, "slice",
                                [xn, outer, width, src_row, start](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < width; ++j)
                                      xn->grad[o * src_row + start + j] += self.grad[o * width + j];
                                });
}

// ---------------------------------------------------------------- linear algebra

// [M, K] x [K, N] -> [M, N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw DimensionError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  std::vector<T> out(m * n);
  using namespace detail;
  MapMat<T>(out.data(), m, n).noalias() =
      ConstMapMat<T>(a.data().data(), m, k) * ConstMapMat<T>(b.data().data(), k, n);
  auto an = a.node(), bn = b.node();
  return make_result<T>({m, n}, std::move(out), {&a, &b}, "matmul",
                        [an, bn, m, k, n](Node<T>& self) {
                          ConstMapMat<T> g(self.grad.data(), m, n);
                          if (an->requires_grad) {
                            an->ensure_grad();
                            MapMat<T>(an->grad.data(), m, k).noalias() +=
                                g * ConstMapMat<T>(bn->data.data(), k, n).transpose();
                          }
                          if (bn->requires_grad) {
                            bn->ensure_grad();
                            MapMat<T>(bn->grad.data(), k, n).noalias() +=
                                ConstMapMat<T>(an->data.data(), m, k).transpose() * g;
                          }
                        });
}

// Batched product: a [B, M, K] x b [B, K, N] -> [B, M, N]; with transpose_b,
// b is [B, N, K] and is used transposed.
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  if (a.dim() != 3 || b.dim() != 3 || a.size(0) != b.size(0) ||
      a.size(2) != (transpose_b ? b.size(2) : b.size(1))) {
    throw DimensionError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()) +
                         (transpose_b ? " (b transposed)" : ""));
  }
  const std::size_t batch = a.size(0), m = a.size(1), k = a.size(2);
  const std::size_t n = transpose_b ? b.size(1) : b.size(2);
  std::vector<T> out(batch * m * n);
  using namespace detail;
  for (std::size_t i = 0; i < batch; ++i) {
    ConstMapMat<T> am(a.data().data() + i * m * k, m, k);
    MapMat<T> om(out.data() + i * m * n, m, n);
    if (transpose_b) {
      om.noalias() = am * ConstMapMat<T>(b.data().data() + i * n * k, n, k).transpose();
    } else {
      om.noalias() = am * ConstMapMat<T>(b.data().data() + i * k * n, k, n);
    }
  }
  auto an = a.node(), bn = b.node();
  return make_result<T>(
      {batch, m, n}, std::move(out), {&a, &b}, "bmm",
      [an, bn, batch, m, k, n, transpose_b](Node<T>& self) {
        if (an->requires_grad) an->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        for (std::size_t i = 0; i < batch; ++i) {
          ConstMapMat<T> g(self.grad.data() + i * m * n, m, n);
          ConstMapMat<T> am(an->data.data() + i * m * k, m, k);
          if (transpose_b) {
            ConstMapMat<T> bm(bn->data.data() + i * n * k, n, k);
            if (an->requires_grad) MapMat<T>(an->grad.data() + i * m * k, m, k).noalias() += g * bm;
            if (bn->requires_grad)
              MapMat<T>(bn->grad.data() + i * n * k, n, k).noalias() += g.transpose() * am;
          } else {
            ConstMapMat<T> bm(bn->data.data() + i * k * n, k, n);
            if (an->requires_grad)
              MapMat<T>(an->grad.data() + i * m * k, m, k).noalias() += g * bm.transpose();
            if (bn->requires_grad)
              MapMat<T>(bn->grad.data() + i * k * n, k, n).noalias() += am.transpose() * g;
          }
        }
      });
}

// ---------------------------------------------------------------- normalization

template <typename T>
Tensor<T> softmax_last(const Tensor<T>& x) {
  if (x.dim() < 1) throw DimensionError("softmax on a rank-0 tensor");
  const std::size_t k = x.shape().back();
  const std::size_t rows = x.numel() / k;
  std::vector<T> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data().data() + r * k;
    T* o = out.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) o[j] /= z;
  }
  auto xn = x.node();
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "softmax",
                                [xn, k, rows](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* y = self.data.data() + r * k;
                                    const T* g = self.grad.data() + r * k;
                                    T dot = 0;
                                    for (std::size_t j = 0; j < k; ++j) dot += g[j] * y[j];
                                    for (std::size_t j = 0; j < k; ++j)
                                      xn->grad[r * k + j] += y[j] * (g[j] - dot);
                                  }
                                });
}

namespace detail {

// Normalizes `groups` contiguous blocks of `len` elements each to zero mean
// and unit variance; shared by layer_norm_last and group_norm.
template <typename T>
Tensor<T> normalize_blocks(const Tensor<T>& x, std::size_t groups, std::size_t len, T eps,
                           const char* name) {
  std::vector<T> out(x.numel());
  std::vector<T> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    const T* in = x.data().data() + g * len;
    T mu = 0;
    for (std::size_t j = 0; j < len; ++j) mu += in[j];
    mu /= static_cast<T>(len);
    T var = 0;
    for (std::size_t j = 0; j < len; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<T>(len);
    inv_std[g] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < len; ++j) out[g * len + j] = (in[j] - mu) * inv_std[g];
  }
  auto xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, name,
                        [xn, groups, len, inv_std = std::move(inv_std)](Node<T>& self) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          const T inv_len = T(1) / static_cast<T>(len);
                          for (std::size_t g = 0; g < groups; ++g) {
                            const T* y = self.data.data() + g * len;
                            const T* dy = self.grad.data() + g * len;
                            T mean_dy = 0, mean_dy_y = 0;
                            for (std::size_t j = 0; j < len; ++j) {
                              mean_dy += dy[j];
                              mean_dy_y += dy[j] * y[j];
                            }
                            mean_dy *= inv_len;
                            mean_dy_y *= inv_len;
                            for (std::size_t j = 0; j < len; ++j)
                              xn->grad[g * len + j] += inv_std[g] * (dy[j] - mean_dy - y[j] * mean_dy_y);
                          }
                        });
}

}  // namespace detail

// Zero-mean unit-variance over the last axis, no affine part.
template <typename T>
Tensor<T> layer_norm_last(const Tensor<T>& x, T eps = T(1e-5)) {
  const std::size_t k = x.shape().back();
  return detail::normalize_blocks(x, x.numel() / k, k, eps, "layer_norm");
}

// x [N, C, H, W] normalized over each group of C / groups channels.
template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, T eps = T(1e-5)) {
  if (x.dim() != 4 || groups == 0 || x.size(1) % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(groups) + " groups for " + shape_str(x.shape()));
  }
  const std::size_t blocks = x.size(0) * groups;
  return detail::normalize_blocks(x, blocks, x.numel() / blocks, eps, "group_norm");
}

// ---------------------------------------------------------------- custom gradient

// Scalar node carrying `value` whose gradient with respect to x is the fixed
// buffer `grad_wrt_x`. Used to route gradients of non-tape computations
// (persistence matching) back onto the tape.
template <typename T>
Tensor<T> inject_gradient(const Tensor<T>& x, T value, std::vector<T> grad_wrt_x) {
  if (grad_wrt_x.size() != x.numel()) {
    throw DimensionError("inject_gradient: gradient length " + std::to_string(grad_wrt_x.size()) +
                         " for " + shape_str(x.shape()));
  }
  auto xn = x.node();
  return detail::make_result<T>({1}, {value}, {&x}, "inject_gradient",
                                [xn, g = std::move(grad_wrt_x)](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t i = 0; i < g.size(); ++i) xn->grad[i] += self.grad[0] * g[i];
                                });
}

}  // namespace topodiff
