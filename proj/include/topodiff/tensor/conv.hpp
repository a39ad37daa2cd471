#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "topodiff/tensor/ops.hpp"

namespace topodiff {

enum class Padding { Same, Valid };

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, stride, pad;
  std::size_t out_h, out_w;
  std::size_t patch() const { return channels * kh * kw; }
  std::size_t out_pixels() const { return out_h * out_w; }
};

// Output columns ox in [lo, hi) read input columns inside [0, width) for tap j.
inline void valid_span(const ConvGeometry& g, std::size_t j, std::size_t& lo, std::size_t& hi) {
  const long pad = static_cast<long>(g.pad), jj = static_cast<long>(j), s = static_cast<long>(g.stride);
  long a = pad - jj > 0 ? (pad - jj + s - 1) / s : 0;
  long b = (static_cast<long>(g.width) - 1 + pad - jj);
  b = b < 0 ? 0 : b / s + 1;
  a = std::min<long>(a, static_cast<long>(g.out_w));
  b = std::clamp<long>(b, a, static_cast<long>(g.out_w));
  lo = static_cast<std::size_t>(a);
  hi = static_cast<std::size_t>(b);
}

// cols[(c*kh + i)*kw + j][oy*out_w + ox] = image[c][oy*stride + i - pad][ox*stride + j - pad],
// rows `ld` apart.
template <typename T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        std::size_t lo, hi;
        valid_span(g, j, lo, hi);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          T* dst = row + oy * g.out_w;
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          std::fill(dst, dst + lo, T(0));
          std::fill(dst + hi, dst + g.out_w, T(0));
          const T* src = image + (c * g.height + static_cast<std::size_t>(y)) * g.width + j - g.pad;
          if (g.stride == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeometry& g, T* image, std::size_t ld) {
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ld;
        std::size_t lo, hi;
        valid_span(g, j, lo, hi);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long y = static_cast<long>(oy * g.stride + i) - static_cast<long>(g.pad);
          if (y < 0 || y >= static_cast<long>(g.height)) continue;
          const T* srcrow = row + oy * g.out_w;
          T* dst = image + (c * g.height + static_cast<std::size_t>(y)) * g.width + j - g.pad;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] += srcrow[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride] += srcrow[ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// Cross-correlation of input [N, C, H, W] with kernel [F, C, kh, kw] plus an
// optional bias [F] (pass an undefined tensor for none).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride = 1, Padding padding = Padding::Same) {
  if (input.dim() != 4 || kernel.dim() != 4) {
    throw DimensionError("conv2d: input " + shape_str(input.shape()) + ", kernel " +
                         shape_str(kernel.shape()));
  }
  if (kernel.size(1) != input.size(1)) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernel.size(1)) +
                         " channels, input " + shape_str(input.shape()) + " has " +
                         std::to_string(input.size(1)));
  }
  if (kernel.size(2) % 2 == 0 || kernel.size(3) % 2 == 0) {
    throw DimensionError("conv2d: kernel extents must be odd, got " + shape_str(kernel.shape()));
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const bool has_bias = bias.defined();
  if (has_bias && bias.numel() != kernel.size(0)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " +
                         std::to_string(kernel.size(0)) + " filters");
  }
  detail::ConvGeometry g{};
  g.channels = input.size(1);
  g.height = input.size(2);
  g.width = input.size(3);
  g.kh = kernel.size(2);
  g.kw = kernel.size(3);
  g.stride = stride;
  if (padding == Padding::Same && g.kh != g.kw) {
    throw DimensionError("conv2d: same padding needs a square kernel");
  }
  g.pad = padding == Padding::Same ? g.kh / 2 : 0;
  if (g.height + 2 * g.pad < g.kh || g.width + 2 * g.pad < g.kw) {
    throw DimensionError("conv2d: kernel larger than padded input " + shape_str(input.shape()));
  }
  g.out_h = (g.height + 2 * g.pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * g.pad - g.kw) / stride + 1;
  const std::size_t n = input.size(0), f = kernel.size(0);
  const std::size_t in_plane = g.channels * g.height * g.width;
  const std::size_t npix = g.out_pixels();
  const bool pointwise = g.kh == 1 && g.kw == 1 && stride == 1;

  using namespace detail;
  const std::size_t total = n * npix;
  std::vector<T> cols(g.patch() * total);
  for (std::size_t s = 0; s < n; ++s) {
    const T* src = input.data().data() + s * in_plane;
    if (pointwise) {
      for (std::size_t c = 0; c < g.channels; ++c)
        std::copy(src + c * npix, src + (c + 1) * npix, cols.data() + c * total + s * npix);
    } else {
      im2col(src, g, cols.data() + s * npix, total);
    }
  }
  std::vector<T> prod(f * total);
  MapMat<T>(prod.data(), f, total).noalias() =
      ConstMapMat<T>(kernel.data().data(), f, g.patch()) * ConstMapMat<T>(cols.data(), g.patch(), total);
  std::vector<T> out(n * f * npix);
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t k = 0; k < f; ++k) {
      const T b = has_bias ? bias[k] : T(0);
      const T* src = prod.data() + k * total + s * npix;
      T* dst = out.data() + (s * f + k) * npix;
      for (std::size_t p = 0; p < npix; ++p) dst[p] = src[p] + b;
    }
  auto in_n = input.node(), k_n = kernel.node();
  auto b_n = has_bias ? bias.node() : nullptr;
  Shape shape{n, f, g.out_h, g.out_w};
  auto bw = [in_n, k_n, b_n, g, n, f, npix, in_plane, pointwise](Node<T>& self) {
    const bool need_in = in_n->requires_grad;
    const bool need_k = k_n->requires_grad;
    if (need_in) in_n->ensure_grad();
    if (need_k) k_n->ensure_grad();
    if (b_n && b_n->requires_grad) {
      b_n->ensure_grad();
      for (std::size_t s = 0; s < n; ++s)
        for (std::size_t k = 0; k < f; ++k) {
          const T* gp = self.grad.data() + (s * f + k) * npix;
          T acc = 0;
          for (std::size_t p = 0; p < npix; ++p) acc += gp[p];
          b_n->grad[k] += acc;
        }
    }
    if (!need_in && !need_k) return;
    const std::size_t total = n * npix;
    std::vector<T> gout(f * total);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t k = 0; k < f; ++k)
        std::copy(self.grad.data() + (s * f + k) * npix, self.grad.data() + (s * f + k + 1) * npix,
                  gout.data() + k * total + s * npix);
    ConstMapMat<T> go(gout.data(), f, total);
    std::vector<T> cols(g.patch() * total);
    if (need_k) {
      for (std::size_t s = 0; s < n; ++s) {
        const T* src = in_n->data.data() + s * in_plane;
        if (pointwise) {
          for (std::size_t c = 0; c < g.channels; ++c)
            std::copy(src + c * npix, src + (c + 1) * npix, cols.data() + c * total + s * npix);
        } else {
          im2col(src, g, cols.data() + s * npix, total);
        }
      }
      MapMat<T>(k_n->grad.data(), f, g.patch()).noalias() +=
          go * ConstMapMat<T>(cols.data(), g.patch(), total).transpose();
    }
    if (need_in) {
      MapMat<T>(cols.data(), g.patch(), total).noalias() =
          ConstMapMat<T>(k_n->data.data(), f, g.patch()).transpose() * go;
      for (std::size_t s = 0; s < n; ++s) {
        T* dst = in_n->grad.data() + s * in_plane;
        if (pointwise) {
          for (std::size_t c = 0; c < g.channels; ++c) {
            const T* src = cols.data() + c * total + s * npix;
            for (std::size_t p = 0; p < npix; ++p) dst[c * npix + p] += src[p];
          }
        } else {
          col2im_add(cols.data() + s * npix, g, dst, total);
        }
      }
    }
  };
  if (has_bias) return make_result<T>(std::move(shape), std::move(out), {&input, &kernel, &bias}, "conv2d", bw);
  return make_result<T>(std::move(shape), std::move(out), {&input, &kernel}, "conv2d", bw);
}

// Nearest-neighbour 2x upsampling of [N, C, H, W].
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& x) {
  if (x.dim() != 4) throw DimensionError("upsample_nearest2x: " + shape_str(x.shape()));
  const std::size_t planes = x.size(0) * x.size(1), h = x.size(2), w = x.size(3);
  std::vector<T> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t xx = 0; xx < 2 * w; ++xx)
        out[(p * 2 * h + y) * 2 * w + xx] = x[(p * h + y / 2) * w + xx / 2];
  auto xn = x.node();
  return detail::make_result<T>({x.size(0), x.size(1), 2 * h, 2 * w}, std::move(out), {&x}, "upsample",
                                [xn, planes, h, w](detail::Node<T>& self) {
                                  if (!xn->requires_grad) return;
                                  xn->ensure_grad();
                                  for (std::size_t p = 0; p < planes; ++p)
                                    for (std::size_t y = 0; y < 2 * h; ++y)
                                      for (std::size_t xx = 0; xx < 2 * w; ++xx)
                                        xn->grad[(p * h + y / 2) * w + xx / 2] +=
                                            self.grad[(p * 2 * h + y) * 2 * w + xx];
                                });
}

}  // namespace topodiff
