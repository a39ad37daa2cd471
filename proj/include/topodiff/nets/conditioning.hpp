#pragma once

// Adaptive Conditioning Bridge and the decoder cross-attention that consumes it.

#include <string>
#include <utility>

#include "topodiff/errors.hpp"
#include "topodiff/nets/layers.hpp"

namespace topodiff::nets {

// Feature enhancer (per-token Linear -> GELU -> Linear) followed by FiLM whose
// per-channel scale and shift come from the time embedding. The FiLM maps start
// at gamma = 1, beta = 0.
template <typename T>
struct ConditioningBridge {
  std::size_t width = 0;
  Linear<T> enh1, enh2, to_gamma, to_beta;

  ConditioningBridge() = default;
  ConditioningBridge(ParamStore<T>& ps, const std::string& name, std::size_t token_dim, std::size_t time_dim,
                     std::mt19937_64& rng)
      : width(token_dim) {
    enh1 = Linear<T>(ps, name + ".enhance1", token_dim, token_dim, rng);
    enh2 = Linear<T>(ps, name + ".enhance2", token_dim, token_dim, rng);
    to_gamma = Linear<T>(ps, name + ".gamma", time_dim, token_dim, rng, Init::Zero);
    to_beta = Linear<T>(ps, name + ".beta", time_dim, token_dim, rng, Init::Zero);
    auto bias = to_gamma.bias.mutable_data();
    std::fill(bias.begin(), bias.end(), T(1));
  }

  Tensor<T> enhance(const Tensor<T>& tokens) const {
    if (tokens.dim() != 3 || tokens.size(2) != width) {
      throw ConfigError("conditioning bridge width " + std::to_string(width) + " does not match tokens " +
                        shape_str(tokens.shape()));
    }
    return enh2(gelu(enh1(tokens)));
  }

  // (gamma, beta), each [N, D]
  std::pair<Tensor<T>, Tensor<T>> modulation(const Tensor<T>& time_emb) const {
    return {to_gamma(time_emb), to_beta(time_emb)};
  }

  Tensor<T> operator()(const Tensor<T>& tokens, const Tensor<T>& time_emb) const {
    auto [gamma, beta] = modulation(time_emb);
    return film(enhance(tokens), gamma, beta);
  }
};

// Feature map queries attend over conditioning tokens; the result is added
// back to the feature map through a zero-initialised output projection.
template <typename T>
struct CrossAttention {
  std::size_t channels = 0, heads = 1;
  GroupNorm<T> norm;
  Linear<T> q, k, v, out;

  CrossAttention() = default;
  CrossAttention(ParamStore<T>& ps, const std::string& name, std::size_t channels_, std::size_t token_dim,
                 std::size_t heads_, std::size_t groups, std::mt19937_64& rng)
      : channels(channels_), heads(heads_) {
    if (channels % heads != 0) {
      throw ConfigError("cross-attention channels " + std::to_string(channels) + " not divisible by " +
                        std::to_string(heads) + " heads");
    }
    norm = GroupNorm<T>(ps, name + ".norm", channels, groups);
    q = Linear<T>(ps, name + ".q", channels, channels, rng);
    k = Linear<T>(ps, name + ".k", token_dim, channels, rng);
    v = Linear<T>(ps, name + ".v", token_dim, channels, rng);
    out = Linear<T>(ps, name + ".out", channels, channels, rng, Init::Zero);
  }

  // z [N, C, h, w], tokens [N, P, D] -> [N, C, h, w]
  Tensor<T> operator()(const Tensor<T>& z, const Tensor<T>& tokens) const {
    const std::size_t n = z.size(0), c = z.size(1), h = z.size(2), w = z.size(3);
    if (c != channels) throw DimensionError("cross-attention expects " + std::to_string(channels) + " channels, got " + shape_str(z.shape()));
    auto queries = permute(reshape(norm(z), {n, c, h * w}), {0, 2, 1});  // [N, hw, C]
    auto attended = out(multi_head_attention(q(queries), k(tokens), v(tokens), heads));
    auto back = reshape(permute(attended, {0, 2, 1}), {n, c, h, w});
    return add(z, back);
  }
};

}  // namespace topodiff::nets
