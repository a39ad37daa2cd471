#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "topodiff/nets/denoiser.hpp"
#include "topodiff/tensor/optim.hpp"

using namespace topodiff;
using namespace topodiff::nets;
using topodiff::testing::check_gradients;
using topodiff::testing::random_tensor;
using topodiff::testing::weighted_sum;
using D = Tensor<double>;

namespace {

ModelConfig small_config(std::size_t size = 16) {
  ModelConfig c;
  c.image_size = size;
  c.base_channels = 8;
  c.channel_multipliers = {1, 2};
  c.attention_levels = {0, 1};
  c.time_embed_dim = 16;
  c.attention_heads = 2;
  c.norm_groups = 4;
  c.encoder.patch_size = 8;
  c.encoder.embed_dim = 16;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  return c;
}

// Moves every parameter off its initial value so zero-initialised branches
// carry gradient.
template <typename T>
void jitter(ParamStore<T>& ps, std::uint64_t seed, double amount) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, amount);
  for (auto& e : ps.entries()) {
    auto d = e.tensor.mutable_data();
    for (auto& v : d) v = static_cast<T>(v + n(rng));
  }
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

TEST(TimeEmbedding, ZeroTimestep) {
  const auto e = sinusoidal_embedding<double>({0}, 8);
  for (int i = 0; i < 4; ++i) EXPECT_EQ(e[static_cast<std::size_t>(i)], 0.0);
  for (int i = 4; i < 8; ++i) EXPECT_EQ(e[static_cast<std::size_t>(i)], 1.0);
}

TEST(TimeEmbedding, NeighbouringTimestepsDifferInEveryBand) {
  const auto e = sinusoidal_embedding<double>({1, 2}, 16);
  for (std::size_t i = 0; i < 8; ++i) {
    const bool sin_differs = e[i] != e[16 + i];
    const bool cos_differs = e[8 + i] != e[16 + 8 + i];
    EXPECT_TRUE(sin_differs || cos_differs) << "band " << i;
  }
}

TEST(TimeEmbedding, MlpShapeAndOddDimension) {
  ParamStore<float> ps;
  std::mt19937_64 rng(1);
  TimeEmbedding<float> te(ps, "t", 12, rng);
  EXPECT_EQ(te({1, 500, 1000}).shape(), (Shape{3, 12}));
  EXPECT_THROW(sinusoidal_embedding<float>({1}, 7), ConfigError);
}

TEST(Encoder, TokenCountAndShape) {
  ParamStore<float> ps;
  std::mt19937_64 rng(2);
  EncoderConfig ec;
  PatchEncoder<float> enc(ps, "enc", ec, 32, rng);
  EXPECT_EQ(enc.num_tokens(), 16u);
  EXPECT_EQ(enc(Tensor<float>({2, 1, 32, 32}, 0.5f)).shape(), (Shape{2, 16, ec.embed_dim}));
  EXPECT_THROW(enc(Tensor<float>({1, 1, 16, 16})), DimensionError);
}

TEST(Encoder, PatchSwapPermutesTokens) {
  ParamStore<double> ps;
  std::mt19937_64 rng(3);
  EncoderConfig ec;
  ec.patch_size = 4;
  ec.embed_dim = 8;
  ec.heads = 2;
  PatchEncoder<double> enc(ps, "enc", ec, 8, rng);
  auto img = random_tensor<double>({1, 1, 8, 8}, rng);
  auto swapped = img.detach();
  {
    std::vector<double> v(img.data().begin(), img.data().end());
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) std::swap(v[static_cast<std::size_t>(r * 8 + c)], v[static_cast<std::size_t>(r * 8 + c + 4)]);
    swapped = D::from_data({1, 1, 8, 8}, v);
  }
  const auto a = enc.patch_embed(img), b = enc.patch_embed(swapped);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_DOUBLE_EQ(a[0 * 8 + k], b[1 * 8 + k]);
    EXPECT_DOUBLE_EQ(a[1 * 8 + k], b[0 * 8 + k]);
    EXPECT_DOUBLE_EQ(a[2 * 8 + k], b[2 * 8 + k]);
  }
}

TEST(Encoder, GradientThroughOneBlock) {
  ParamStore<double> ps;
  std::mt19937_64 rng(4);
  EncoderConfig ec;
  ec.patch_size = 4;
  ec.embed_dim = 8;
  ec.heads = 2;
  ec.depth = 1;
  PatchEncoder<double> enc(ps, "enc", ec, 8, rng);
  auto img = random_tensor<double>({2, 1, 8, 8}, rng);
  std::vector<D*> inputs{&img};
  for (auto& e : ps.entries()) inputs.push_back(&e.tensor);
  const auto r = check_gradients<double>(inputs, [&] { return weighted_sum(enc(img)); }, 1e-6);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Film, IdentityAndConstantCases) {
  std::mt19937_64 rng(5);
  auto c = random_tensor<double>({2, 3, 4}, rng);
  const auto id = film(c, D({2, 4}, 1.0), D({2, 4}, 0.0));
  for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_EQ(id[i], c[i]);
  auto beta = random_tensor<double>({2, 4}, rng);
  const auto flat = film(c, D({2, 4}, 0.0), beta);
  for (std::size_t i = 0; i < c.numel(); ++i) EXPECT_EQ(flat[i], beta[(i / 12) * 4 + i % 4]);
  const auto twos = film(D({1, 5, 3}, 0.5), D({1, 3}, 2.0), D({1, 3}, 1.0));
  for (std::size_t i = 0; i < twos.numel(); ++i) EXPECT_EQ(twos[i], 2.0);
}

TEST(Bridge, StartsAsIdentityModulation) {
  ParamStore<double> ps;
  std::mt19937_64 rng(6);
  ConditioningBridge<double> acb(ps, "acb", 8, 6, rng);
  auto tokens = random_tensor<double>({2, 3, 8}, rng), temb = random_tensor<double>({2, 6}, rng);
  const auto out = acb(tokens, temb), enhanced = acb.enhance(tokens);
  for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out[i], enhanced[i]);
  EXPECT_THROW(acb(random_tensor<double>({2, 3, 5}, rng), temb), ConfigError);
}

TEST(CrossAttentionBlock, SingleTokenOutputIsResidualPlusValue) {
  ParamStore<double> ps;
  std::mt19937_64 rng(7);
  CrossAttention<double> xa(ps, "xa", 4, 6, 2, 2, rng);
  jitter(ps, 70, 0.3);
  auto z = random_tensor<double>({1, 4, 2, 3}, rng);
  auto tok = random_tensor<double>({1, 1, 6}, rng);
  const auto got = xa(z, tok);
  // With one token every attention weight is 1, so each position receives out(v(token)).
  const auto delta = xa.out(xa.v(tok));  // [1, 1, 4]
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t p = 0; p < 6; ++p) EXPECT_NEAR(got[c * 6 + p], z[c * 6 + p] + delta[c], 1e-12);
  const auto twice = xa(z, concat<double>({tok, tok}, 1));
  for (std::size_t i = 0; i < got.numel(); ++i) EXPECT_NEAR(twice[i], got[i], 1e-12);
}

TEST(CrossAttentionBlock, GradientCheck) {
  ParamStore<double> ps;
  std::mt19937_64 rng(8);
  CrossAttention<double> xa(ps, "xa", 4, 6, 2, 2, rng);
  jitter(ps, 80, 0.3);
  auto z = random_tensor<double>({2, 4, 2, 2}, rng);
  auto tok = random_tensor<double>({2, 3, 6}, rng);
  std::vector<D*> inputs{&z, &tok};
  for (auto& e : ps.entries()) inputs.push_back(&e.tensor);
  EXPECT_LT(check_gradients<double>(inputs, [&] { return weighted_sum(xa(z, tok)); }, 1e-6).rel_error, 1e-3);
}

TEST(Denoiser, OutputShapesMatchInput) {
  for (bool acb : {true, false}) {
    auto cfg = small_config();
    cfg.use_acb = acb;
    Denoiser<float> net(cfg, 1);
    const auto out = net(Tensor<float>({3, 1, 16, 16}, 0.1f), {1, 10, 1000}, Tensor<float>({3, 1, 16, 16}, 0.3f));
    EXPECT_EQ(out.eps_hat.shape(), (Shape{3, 1, 16, 16}));
    EXPECT_EQ(out.aux_logits.shape(), (Shape{3, 1, 16, 16}));
    EXPECT_EQ(net.forward_count(), 3u);
  }
}

TEST(Denoiser, RejectsMismatchedInputs) {
  Denoiser<float> net(small_config(), 1);
  EXPECT_THROW(net(Tensor<float>({1, 1, 8, 8}), {1}, Tensor<float>({1, 1, 8, 8})), DimensionError);
  EXPECT_THROW(net(Tensor<float>({2, 1, 16, 16}), {1}, Tensor<float>({2, 1, 16, 16})), DimensionError);
  auto bad = small_config();
  bad.attention_levels = {5};
  EXPECT_THROW(Denoiser<float>(bad, 1), ConfigError);
}

TEST(Denoiser, ImageIndependentAtInitialisation) {
  Denoiser<float> net(small_config(), 11);
  std::mt19937_64 rng(12);
  auto x = random_tensor<float>({2, 1, 16, 16}, rng);
  const auto a = net(x, {5, 700}, random_tensor<float>({2, 1, 16, 16}, rng, 0, 1));
  const auto b = net(x, {5, 700}, random_tensor<float>({2, 1, 16, 16}, rng, 0, 1));
  EXPECT_EQ(max_abs_diff(a.eps_hat, b.eps_hat), 0.0);
  EXPECT_EQ(max_abs_diff(a.aux_logits, b.aux_logits), 0.0);
}

TEST(Denoiser, DeterministicForSeed) {
  Denoiser<float> a(small_config(), 42), b(small_config(), 42), c(small_config(), 43);
  ASSERT_EQ(a.params().size(), b.params().size());
  bool any_diff = false;
  for (std::size_t k = 0; k < a.params().size(); ++k) {
    const auto x = a.params().entries()[k].tensor.data(), y = b.params().entries()[k].tensor.data(),
               z = c.params().entries()[k].tensor.data();
    EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin(), y.end()));
    if (!std::equal(x.begin(), x.end(), z.begin(), z.end())) any_diff = true;
  }
  EXPECT_TRUE(any_diff);
  std::mt19937_64 rng(1);
  auto x = random_tensor<float>({1, 1, 16, 16}, rng), img = random_tensor<float>({1, 1, 16, 16}, rng);
  EXPECT_EQ(max_abs_diff(a(x, {3}, img).eps_hat, b(x, {3}, img).eps_hat), 0.0);
}

TEST(Denoiser, FullModelGradientOnParameterSample) {
  Denoiser<double> net(small_config(16), 21);
  jitter(net.params(), 22, 0.05);
  std::mt19937_64 rng(23);
  auto x = random_tensor<double>({2, 1, 16, 16}, rng), img = random_tensor<double>({2, 1, 16, 16}, rng, 0, 1);
  const std::vector<long> t{3, 600};
  auto& entries = net.params().entries();
  std::vector<D*> inputs;
  std::vector<std::vector<std::size_t>> positions;
  std::uniform_int_distribution<std::size_t> pick_entry(0, entries.size() - 1);
  std::size_t total = 0;
  while (total < 50) {
    auto& e = entries[pick_entry(rng)];
    std::uniform_int_distribution<std::size_t> pick(0, e.tensor.numel() - 1);
    inputs.push_back(&e.tensor);
    positions.push_back({pick(rng)});
    ++total;
  }
  const auto r = check_gradients<double>(
      inputs,
      [&] {
        const auto out = net(x, t, img);
        return add(weighted_sum(out.eps_hat, 5), weighted_sum(out.aux_logits, 6));
      },
      1e-6, positions);
  EXPECT_EQ(r.checked, 50u);
  EXPECT_LT(r.rel_error, 1e-3);
}

TEST(Denoiser, ConditioningIsLiveAfterOneStep) {
  Denoiser<float> net(small_config(), 31);
  std::mt19937_64 rng(32);
  auto x = random_tensor<float>({2, 1, 16, 16}, rng), img = random_tensor<float>({2, 1, 16, 16}, rng, 0, 1);
  const std::vector<long> t{10, 400};
  AdamWState<float> adam;
  adam.init(net.params());
  AdamWHyper h;
  h.lr = 1e-3;
  net.params().zero_grad();
  const auto out = net(x, t, img);
  backward(add(weighted_sum(out.eps_hat, 1), weighted_sum(out.aux_logits, 2)));
  adamw_step(net.params(), adam, h);
  const auto other = random_tensor<float>({2, 1, 16, 16}, rng, 0, 1);
  EXPECT_GT(max_abs_diff(net(x, t, img).eps_hat, net(x, t, other).eps_hat), 0.0);
}
