#pragma once

// Dual-head conditional UNet: the noisy mask runs through an encoder-decoder
// with time embedding in every residual block, decoder levels listed in
// `attention_levels` attend to ACB-conditioned image tokens, and two sibling
// 1x1 heads read the final shared feature map.

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "topodiff/errors.hpp"
#include "topodiff/nets/conditioning.hpp"
#include "topodiff/nets/encoder.hpp"
#include "topodiff/nets/layers.hpp"
#include "topodiff/nets/time_embedding.hpp"

namespace topodiff::nets {

struct ModelConfig {
  std::size_t image_size = 32;
  std::size_t base_channels = 16;
  std::vector<std::size_t> channel_multipliers{1, 2, 4};
  std::vector<std::size_t> attention_levels{1, 2};  // decoder levels, 0 = full resolution
  std::size_t time_embed_dim = 64;
  std::size_t attention_heads = 4;
  std::size_t norm_groups = 8;
  bool use_acb = true;
  bool image_stem = true;
  EncoderConfig encoder;

  std::size_t levels() const { return channel_multipliers.size(); }
  std::size_t channels(std::size_t level) const { return base_channels * channel_multipliers[level]; }

  void validate() const {
    if (channel_multipliers.empty()) throw ConfigError("model.channel_multipliers must be nonempty");
    if (base_channels == 0) throw ConfigError("model.base_channels must be positive");
    for (auto m : channel_multipliers)
      if (m == 0) throw ConfigError("model.channel_multipliers entries must be positive");
    for (auto l : attention_levels)
      if (l >= levels()) {
        throw ConfigError("model.attention_levels entry " + std::to_string(l) + " exceeds the " +
                          std::to_string(levels()) + " UNet levels");
      }
    if (time_embed_dim == 0 || time_embed_dim % 2 != 0) throw ConfigError("model.time_embed_dim must be even and positive");
    const std::size_t shrink = std::size_t{1} << (levels() - 1);
    if (image_size % shrink != 0) {
      throw ConfigError("model.image_size " + std::to_string(image_size) + " is not divisible by " + std::to_string(shrink));
    }
    if (use_acb) encoder.validate(image_size);
  }

  bool attends(std::size_t level) const {
    return use_acb && std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
  }
};

template <typename T>
struct DualHeadOutput {
  Tensor<T> eps_hat;     // [N, 1, H, W]
  Tensor<T> aux_logits;  // [N, 1, H, W]
};

template <typename T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> time_proj;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParamStore<T>& ps, const std::string& name, std::size_t in, std::size_t out, std::size_t time_dim,
           std::size_t groups, std::mt19937_64& rng)
      : has_skip(in != out) {
    norm1 = GroupNorm<T>(ps, name + ".norm1", in, groups);
    conv1 = Conv2d<T>(ps, name + ".conv1", in, out, 3, rng);
    time_proj = Linear<T>(ps, name + ".time", time_dim, out, rng);
    norm2 = GroupNorm<T>(ps, name + ".norm2", out, groups);
    conv2 = Conv2d<T>(ps, name + ".conv2", out, out, 3, rng);
    if (has_skip) skip = Conv2d<T>(ps, name + ".skip", in, out, 1, rng);
  }

  // x [N, C, H, W], time_act [N, time_dim] (already passed through SiLU)
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& time_act) const {
    auto h = conv1(silu(norm1(x)));
    h = add_channelwise(h, time_proj(time_act));
    h = conv2(silu(norm2(h)));
    return add(has_skip ? skip(x) : x, h);
  }
};

// Image-side inputs reused across timesteps: the raw image and its tokens.
template <typename T>
struct Conditioning {
  Tensor<T> image;   // [N, 1, H, W]
  Tensor<T> tokens;  // [N, P, D]; undefined when the ACB is off
};

template <typename T>
class Denoiser {
 public:
  Denoiser(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const std::size_t te = cfg_.time_embed_dim, g = cfg_.norm_groups, L = cfg_.levels();
    time_ = TimeEmbedding<T>(params_, "time", te, rng);
    in_conv_ = Conv2d<T>(params_, "unet.in", 1, cfg_.channels(0), 3, rng);
    if (cfg_.image_stem) stem_ = Conv2d<T>(params_, "unet.stem", 1, cfg_.channels(0), 3, rng, 1, Init::Zero);
    if (cfg_.use_acb) {
      encoder_ = PatchEncoder<T>(params_, "encoder", cfg_.encoder, cfg_.image_size, rng);
      bridge_ = ConditioningBridge<T>(params_, "acb", cfg_.encoder.embed_dim, te, rng);
    }
    std::size_t prev = cfg_.channels(0);
    for (std::size_t l = 0; l < L; ++l) {
      const std::string tag = std::to_string(l);
      enc_.emplace_back(params_, "unet.enc" + tag, prev, cfg_.channels(l), te, g, rng);
      prev = cfg_.channels(l);
      if (l + 1 < L) down_.emplace_back(params_, "unet.down" + tag, prev, prev, 3, rng, 2);
    }
    mid_ = ResBlock<T>(params_, "unet.mid", prev, prev, te, g, rng);
    dec_.resize(L);
    up_.resize(L);
    xattn_.resize(L);
    for (std::size_t step = 0; step < L; ++step) {
      const std::size_t l = L - 1 - step;
      const std::string tag = std::to_string(l);
      dec_[l] = ResBlock<T>(params_, "unet.dec" + tag, prev + cfg_.channels(l), cfg_.channels(l), te, g, rng);
      prev = cfg_.channels(l);
      if (cfg_.attends(l)) {
        xattn_[l] = CrossAttention<T>(params_, "unet.xattn" + tag, prev, cfg_.encoder.embed_dim, cfg_.attention_heads, g, rng);
      }
      if (l > 0) up_[l] = Conv2d<T>(params_, "unet.up" + tag, prev, prev, 3, rng);
    }
    out_norm_ = GroupNorm<T>(params_, "unet.out_norm", prev, g);
    eps_head_ = Conv2d<T>(params_, "head.eps", prev, 1, 1, rng);
    aux_head_ = Conv2d<T>(params_, "head.aux", prev, 1, 1, rng);
  }

  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  const PatchEncoder<T>& encoder() const { return encoder_; }
  const ConditioningBridge<T>& bridge() const { return bridge_; }
  const TimeEmbedding<T>& time_embedding() const { return time_; }

  // Number of per-image network evaluations performed so far.
  std::size_t forward_count() const { return forward_count_; }
  void reset_forward_count() { forward_count_ = 0; }

  Conditioning<T> condition(const Tensor<T>& image) const {
    check_map(image, "image");
    Conditioning<T> c{image, Tensor<T>()};
    if (cfg_.use_acb) c.tokens = encoder_(image);
    return c;
  }

  DualHeadOutput<T> operator()(const Tensor<T>& x_t, const std::vector<long>& t, const Tensor<T>& image) const {
    return forward(x_t, t, condition(image));
  }

  DualHeadOutput<T> forward(const Tensor<T>& x_t, const std::vector<long>& t, const Conditioning<T>& cond) const {
    check_map(x_t, "x_t");
    if (x_t.shape() != cond.image.shape()) {
      throw DimensionError("x_t " + shape_str(x_t.shape()) + " and image " + shape_str(cond.image.shape()) + " differ");
    }
    if (t.size() != x_t.size(0)) throw DimensionError("need one timestep per sample");
    forward_count_ += x_t.size(0);
    const std::size_t L = cfg_.levels();
    auto temb = time_(t);
    auto temb_act = silu(temb);
    Tensor<T> ctx;
    if (cfg_.use_acb) ctx = bridge_(cond.tokens, temb);

    auto h = in_conv_(x_t);
    if (cfg_.image_stem) h = add(h, stem_(cond.image));
    std::vector<Tensor<T>> skips;
    for (std::size_t l = 0; l < L; ++l) {
      h = enc_[l](h, temb_act);
      skips.push_back(h);
      if (l + 1 < L) h = down_[l](h);
    }
    h = mid_(h, temb_act);
    for (std::size_t step = 0; step < L; ++step) {
      const std::size_t l = L - 1 - step;
      h = dec_[l](concat<T>({h, skips[l]}, 1), temb_act);
      if (cfg_.attends(l)) h = xattn_[l](h, ctx);
      if (l > 0) h = up_[l](upsample_nearest2x(h));
    }
    auto shared = silu(out_norm_(h));
    return {eps_head_(shared), aux_head_(shared)};
  }

 private:
  void check_map(const Tensor<T>& x, const char* what) const {
    if (x.dim() != 4 || x.size(1) != 1 || x.size(2) != cfg_.image_size || x.size(3) != cfg_.image_size) {
      throw DimensionError(std::string(what) + " must be [N, 1, " + std::to_string(cfg_.image_size) + ", " +
                           std::to_string(cfg_.image_size) + "], got " + shape_str(x.shape()));
    }
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  TimeEmbedding<T> time_;
  Conv2d<T> in_conv_, stem_;
  PatchEncoder<T> encoder_;
  ConditioningBridge<T> bridge_;
  std::vector<ResBlock<T>> enc_;
  std::vector<Conv2d<T>> down_;
  ResBlock<T> mid_;
  std::vector<ResBlock<T>> dec_;
  std::vector<Conv2d<T>> up_;
  std::vector<CrossAttention<T>> xattn_;
  GroupNorm<T> out_norm_;
  Conv2d<T> eps_head_, aux_head_;
  mutable std::size_t forward_count_ = 0;
};

}  // namespace topodiff::nets
