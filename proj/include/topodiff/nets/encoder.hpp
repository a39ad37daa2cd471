#pragma once

// Small patch transformer that turns the conditioning image into tokens. It is
// trained jointly with the denoiser; its parameters live under "encoder." so a
// separately trained encoder can be imported from a checkpoint.

#include <string>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/nets/layers.hpp"

namespace topodiff::nets {

struct EncoderConfig {
  std::size_t patch_size = 8;
  std::size_t embed_dim = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;

  void validate(std::size_t image_size) const {
    if (patch_size == 0 || embed_dim == 0 || heads == 0) throw ConfigError("model.encoder_* sizes must be positive");
    if (embed_dim % heads != 0) {
      throw ConfigError("model.encoder_embed_dim (" + std::to_string(embed_dim) + ") must be divisible by model.encoder_heads (" +
                        std::to_string(heads) + ")");
    }
    if (image_size % patch_size != 0) {
      throw ConfigError("image size " + std::to_string(image_size) + " is not divisible by model.encoder_patch (" +
                        std::to_string(patch_size) + ")");
    }
  }
};

// [N, C, H, W] -> [N, (H/p)(W/p), C p p], patches in scan order.
template <typename T>
Tensor<T> patchify(const Tensor<T>& image, std::size_t p) {
  const std::size_t n = image.size(0), c = image.size(1), h = image.size(2), w = image.size(3);
  if (h % p != 0 || w % p != 0) {
    throw ConfigError("image " + std::to_string(h) + "x" + std::to_string(w) + " is not divisible by patch " + std::to_string(p));
  }
  auto x = reshape(image, {n, c, h / p, p, w / p, p});
  x = permute(x, {0, 2, 4, 1, 3, 5});
  return reshape(x, {n, (h / p) * (w / p), c * p * p});
}

template <typename T>
struct EncoderBlock {
  LayerNorm<T> ln1, ln2;
  Linear<T> q, k, v, proj, fc1, fc2;
  std::size_t heads = 1;

  EncoderBlock() = default;
  EncoderBlock(ParamStore<T>& ps, const std::string& name, const EncoderConfig& cfg, std::mt19937_64& rng)
      : heads(cfg.heads) {
    const std::size_t d = cfg.embed_dim;
    ln1 = LayerNorm<T>(ps, name + ".ln1", d);
    q = Linear<T>(ps, name + ".q", d, d, rng);
    k = Linear<T>(ps, name + ".k", d, d, rng);
    v = Linear<T>(ps, name + ".v", d, d, rng);
    proj = Linear<T>(ps, name + ".proj", d, d, rng);
    ln2 = LayerNorm<T>(ps, name + ".ln2", d);
    fc1 = Linear<T>(ps, name + ".fc1", d, d * cfg.mlp_ratio, rng);
    fc2 = Linear<T>(ps, name + ".fc2", d * cfg.mlp_ratio, d, rng);
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    auto h = ln1(x);
    auto y = add(x, proj(multi_head_attention(q(h), k(h), v(h), heads)));
    return add(y, fc2(gelu(fc1(ln2(y)))));
  }
};

template <typename T>
struct PatchEncoder {
  EncoderConfig cfg;
  std::size_t image_size = 0;
  Linear<T> embed;
  Tensor<T> pos;  // [P, D]
  std::vector<EncoderBlock<T>> blocks;
  LayerNorm<T> ln_out;

  PatchEncoder() = default;
  PatchEncoder(ParamStore<T>& ps, const std::string& name, const EncoderConfig& cfg_, std::size_t image_size_,
               std::mt19937_64& rng)
      : cfg(cfg_), image_size(image_size_) {
    cfg.validate(image_size);
    const std::size_t side = image_size / cfg.patch_size;
    embed = Linear<T>(ps, name + ".patch_embed", cfg.patch_size * cfg.patch_size, cfg.embed_dim, rng);
    pos = ps.normal(name + ".pos", {side * side, cfg.embed_dim}, T(0.02), rng);
    for (std::size_t i = 0; i < cfg.depth; ++i) {
      blocks.emplace_back(ps, name + ".block" + std::to_string(i), cfg, rng);
    }
    ln_out = LayerNorm<T>(ps, name + ".ln_out", cfg.embed_dim);
  }

  std::size_t num_tokens() const {
    const std::size_t side = image_size / cfg.patch_size;
    return side * side;
  }

  // Token embeddings before positional encoding: [N, P, D].
  Tensor<T> patch_embed(const Tensor<T>& image) const { return embed(patchify(image, cfg.patch_size)); }

  // image [N, 1, H, W] -> tokens [N, P, D]
  Tensor<T> operator()(const Tensor<T>& image) const {
    if (image.dim() != 4 || image.size(1) != 1 || image.size(2) != image_size || image.size(3) != image_size) {
      throw DimensionError("encoder expects [N, 1, " + std::to_string(image_size) + ", " + std::to_string(image_size) +
                           "], got " + shape_str(image.shape()));
    }
    auto x = add_bias(patch_embed(image), pos);
    for (const auto& b : blocks) x = b(x);
    return ln_out(x);
  }
};

}  // namespace topodiff::nets
