#pragma once

// Parameterised building blocks shared by the encoder, the conditioning
// bridge and the UNet. Every layer registers its tensors in a ParamStore under
// a dotted prefix and keeps handles for the forward pass.

#include <cmath>
#include <random>
#include <string>

#include "topodiff/errors.hpp"
#include "topodiff/tensor/conv.hpp"
#include "topodiff/tensor/ops.hpp"
#include "topodiff/tensor/params.hpp"

namespace topodiff::nets {

enum class Init { Default, Zero };

// y = x W + b over the last axis; x may have any leading shape.
template <typename T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
  std::size_t in = 0, out = 0;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, std::size_t in_features, std::size_t out_features,
         std::mt19937_64& rng, Init init = Init::Default)
      : in(in_features), out(out_features) {
    if (init == Init::Zero) {
      weight = ps.zeros(name + ".weight", {in, out});
      bias = ps.zeros(name + ".bias", {out});
    } else {
      const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in)));
      weight = ps.uniform(name + ".weight", {in, out}, bound, rng);
      bias = ps.uniform(name + ".bias", {out}, bound, rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    if (x.shape().back() != in) {
      throw DimensionError("linear layer expects last axis " + std::to_string(in) + ", got " + shape_str(x.shape()));
    }
    Shape lead = x.shape();
    lead.pop_back();
    const std::size_t rows = x.numel() / in;
    auto y = add_bias(matmul(reshape(x, {rows, in}), weight), bias);
    lead.push_back(out);
    return reshape(y, lead);
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;    // [out]
  std::size_t stride = 1;

  Conv2d() = default;
  Conv2d(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t k,
         std::mt19937_64& rng, std::size_t stride_ = 1, Init init = Init::Default)
      : stride(stride_) {
    if (init == Init::Zero) {
      weight = ps.zeros(name + ".weight", {out, in, k, k});
      bias = ps.zeros(name + ".bias", {out});
    } else {
      const T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(in * k * k)));
      weight = ps.uniform(name + ".weight", {out, in, k, k}, bound, rng);
      bias = ps.uniform(name + ".bias", {out}, bound, rng);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, stride, Padding::Same); }
};

// Largest group count not above `preferred` that divides `channels`.
inline std::size_t group_count(std::size_t channels, std::size_t preferred) {
  std::size_t g = std::min(channels, preferred);
  while (channels % g != 0) --g;
  return g;
}

template <typename T>
struct GroupNorm {
  Tensor<T> gamma, beta;  // [C]
  std::size_t groups = 1;

  GroupNorm() = default;
  GroupNorm(ParamStore<T>& ps, const std::string& name, std::size_t channels, std::size_t preferred_groups)
      : groups(group_count(channels, preferred_groups)) {
    gamma = ps.constant(name + ".gamma", {channels}, T(1));
    beta = ps.zeros(name + ".beta", {channels});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return affine_channels(group_norm(x, groups), gamma, beta); }
};

template <typename T>
struct LayerNorm {
  Tensor<T> gamma, beta;  // [D]

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, std::size_t dim) {
    gamma = ps.constant(name + ".gamma", {dim}, T(1));
    beta = ps.zeros(name + ".beta", {dim});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return add_bias(mul_bias(layer_norm_last(x), gamma), beta); }
};

// [N, P, H*dh] -> [N*H, P, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t n = x.size(0), p = x.size(1), d = x.size(2);
  if (d % heads != 0) {
    throw ConfigError("width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  return reshape(permute(reshape(x, {n, p, heads, dh}), {0, 2, 1, 3}), {n * heads, p, dh});
}

// [N*H, P, dh] -> [N, P, H*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, std::size_t heads) {
  const std::size_t nh = x.size(0), p = x.size(1), dh = x.size(2);
  const std::size_t n = nh / heads;
  return reshape(permute(reshape(x, {n, heads, p, dh}), {0, 2, 1, 3}), {n, p, heads * dh});
}

// softmax(q k^T / sqrt(d_k)) v per head; q [N, Pq, D], k and v [N, Pk, D].
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads) {
  const std::size_t dh = q.size(2) / heads;
  auto qh = split_heads(q, heads), kh = split_heads(k, heads), vh = split_heads(v, heads);
  auto scores = scale(bmm(qh, kh, true), static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
  return merge_heads(bmm(softmax_last(scores), vh), heads);
}

}  // namespace topodiff::nets
