#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support/gradcheck.hpp"
#include "topodiff/losses.hpp"

using namespace topodiff;
using topodiff::testing::check_gradients;
using topodiff::testing::random_tensor;
using D = Tensor<double>;

namespace {

D binary_tensor(Shape shape, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.4);
  std::vector<double> v(numel_of(shape));
  for (auto& x : v) x = b(rng) ? 1.0 : 0.0;
  return D::from_data(std::move(shape), std::move(v));
}

double bce(const D& logits, const D& y) {
  double s = 0;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    s += -(y[i] * std::log(p) + (1 - y[i]) * std::log(1 - p));
  }
  return s / static_cast<double>(logits.numel());
}

// 8x8 field with a bright square (value 0.9) on a 0.1 background; `extra`
// adds a separate single-pixel peak.
D square_field(double extra) {
  std::vector<double> v(64, 0.1);
  for (int r = 1; r < 4; ++r)
    for (int c = 1; c < 4; ++c) v[static_cast<std::size_t>(r * 8 + c)] = 0.9;
  if (extra > 0) v[6 * 8 + 6] = extra;
  return D::from_data({1, 1, 8, 8}, v);
}

WeightedLoss<double> zero_hybrid() {
  WeightedLoss<double> h;
  h.total = D::scalar(0.25);
  h.report.total = 0.25;
  return h;
}

struct ZeroNoiseModel {
  struct Out {
    D eps_hat, aux_logits;
  };
  mutable int calls = 0;
  Out operator()(const D& x, const std::vector<long>&, const D&) const {
    ++calls;
    return {D(x.shape(), 0.0), D(x.shape(), 0.0)};
  }
};

}  // namespace

TEST(DiceLoss, PerfectBinaryPredictionIsZero) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const auto y = binary_tensor({2, 1, 6, 6}, rng);
    EXPECT_EQ(dice_loss(y, y, 1.0).item(), 0.0);
    EXPECT_EQ(dice_loss(y, y, 1e-6).item(), 0.0);
  }
}

TEST(DiceLoss, DisjointMasks) {
  auto p = D::from_data({4}, {1, 1, 0, 0}), y = D::from_data({4}, {0, 0, 1, 1});
  EXPECT_NEAR(dice_loss(p, y, 1.0).item(), 1.0 - 1.0 / 5.0, 1e-15);
  EXPECT_NEAR(dice_loss(p, y, 1e-9).item(), 1.0, 1e-9);
}

TEST(DiceLoss, HalfProbabilityOnAllOnes) {
  EXPECT_NEAR(dice_loss(D({100}, 0.5), D({100}, 1.0), 0.0).item(), 1.0 / 3.0, 1e-15);
}

TEST(DiceLoss, BoundsAndShapeErrors) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto p = random_tensor<double>({20}, rng, 0, 1);
    const auto y = binary_tensor({20}, rng);
    const double l = dice_loss(p, y, 1.0).item();
    EXPECT_GE(l, 0.0);
    EXPECT_LT(l, 1.0);
  }
  EXPECT_THROW(dice_loss(D({3}), D({4}), 1.0), DimensionError);
}

TEST(FocalLoss, GammaZeroIsBinaryCrossEntropy) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const auto z = random_tensor<double>({3, 7}, rng, -6, 6);
    const auto y = binary_tensor({3, 7}, rng);
    EXPECT_NEAR(focal_loss(z, y, 0.0).item(), bce(z, y), 1e-6);
    const auto zf = random_tensor<float>({3, 7}, rng, -6, 6);
    std::vector<float> yv(21);
    for (std::size_t i = 0; i < 21; ++i) yv[i] = static_cast<float>(y[i]);
    D zd = D::from_data({3, 7}, std::vector<double>(zf.data().begin(), zf.data().end()));
    EXPECT_NEAR(focal_loss(zf, Tensor<float>::from_data({3, 7}, yv), 0.0f).item(), bce(zd, y), 1e-6);
  }
}

TEST(FocalLoss, HandValues) {
  EXPECT_NEAR(focal_loss(D({1}, 0.0), D({1}, 1.0), 2.0).item(), -0.25 * std::log(0.5), 1e-12);
  EXPECT_NEAR(focal_loss(D({1}, 0.0), D({1}, 1.0), 2.0).item(), 0.1733, 5e-5);
  EXPECT_LT(focal_loss(D({1}, 20.0), D({1}, 1.0), 2.0).item(), 1e-15);
  EXPECT_LT(focal_loss(D({1}, -20.0), D({1}, 0.0), 2.0).item(), 1e-15);
  EXPECT_THROW(focal_loss(D({3}), D({4}), 2.0), DimensionError);
}

TEST(FocalLoss, GradientCheck) {
  std::mt19937_64 rng(4);
  auto z = random_tensor<double>({2, 9}, rng, -4, 4);
  const auto y = binary_tensor({2, 9}, rng);
  for (double g : {0.0, 2.0}) {
    EXPECT_LT(check_gradients<double>({&z}, [&] { return focal_loss(z, y, g); }, 1e-6).rel_error, 1e-4);
  }
}

TEST(DiceLoss, GradientCheck) {
  std::mt19937_64 rng(5);
  auto p = random_tensor<double>({2, 9}, rng, 0, 1);
  const auto y = binary_tensor({2, 9}, rng);
  EXPECT_LT(check_gradients<double>({&p}, [&] { return dice_loss(p, y, 1.0); }, 1e-6).rel_error, 1e-4);
}

TEST(DenoisingLoss, IdentitiesAndGradient) {
  std::mt19937_64 rng(6);
  auto eps = random_tensor<double>({2, 1, 4, 4}, rng);
  const auto x0 = binary_tensor({2, 1, 4, 4}, rng);
  auto parts = denoising_loss(eps, eps, x0, x0, 1.0);
  EXPECT_EQ(parts.mse.item(), 0.0);
  EXPECT_EQ(parts.dice.item(), 0.0);
  parts = denoising_loss(eps, add_scalar(eps, 1.0), x0, x0, 1.0);
  EXPECT_NEAR(parts.mse.item(), 1.0, 1e-12);
  auto eps_hat = random_tensor<double>({2, 1, 4, 4}, rng);
  auto implied = random_tensor<double>({2, 1, 4, 4}, rng, 0.05, 0.95);
  const auto r = check_gradients<double>(
      {&eps_hat, &implied},
      [&] {
        const auto d = denoising_loss(eps, eps_hat, x0, implied, 1.0);
        return add(d.mse, scale(d.dice, 0.5));
      },
      1e-6);
  EXPECT_LT(r.rel_error, 1e-4);
}

TEST(HybridLoss, WeightedCombination) {
  HybridParts<double> parts{{D::scalar(0.1), D::scalar(0.2)}, D::scalar(0.3), D::scalar(0.1)};
  LossWeights w;
  w.lambda = 0.5;
  auto out = hybrid_loss(parts, w);
  EXPECT_NEAR(out.total.item(), 0.1 + 0.1 + 0.3 + 0.1, 1e-15);
  EXPECT_NEAR(out.report.total, out.total.item(), 1e-12);

  w.lambda = 1.0;
  HybridParts<double> simple{{D::scalar(0.2), D::scalar(0.0)}, D::scalar(0.3), D::scalar(0.1)};
  EXPECT_NEAR(hybrid_loss(simple, w).total.item(), 0.6, 1e-15);

  w.beta = w.gamma_w = 0;
  EXPECT_NEAR(hybrid_loss(parts, w).total.item(), 0.1 + 0.2, 1e-15);
  w.alpha = 0;
  EXPECT_EQ(hybrid_loss(parts, w).total.item(), 0.0);
}

TEST(HybridLoss, ReportMatchesTotalOnRandomInputs) {
  std::mt19937_64 rng(7);
  LossWeights w;
  w.alpha = 0.7;
  w.beta = 1.3;
  w.gamma_w = 0.4;
  w.lambda = 0.6;
  for (int trial = 0; trial < 20; ++trial) {
    const auto eps = random_tensor<float>({2, 1, 4, 4}, rng), eps_hat = random_tensor<float>({2, 1, 4, 4}, rng);
    const auto x0 = random_tensor<float>({2, 1, 4, 4}, rng, 0, 1), implied = random_tensor<float>({2, 1, 4, 4}, rng);
    const auto z = random_tensor<float>({2, 1, 4, 4}, rng, -3, 3);
    HybridParts<float> p{denoising_loss(eps, eps_hat, x0, implied, 1.0f), dice_loss(sigmoid(z), x0, 1.0f),
                         focal_loss(z, x0, 2.0f)};
    const auto out = hybrid_loss(p, w);
    const auto& r = out.report;
    const double recombined =
        w.alpha * (r.denoising_mse + w.lambda * r.denoising_dice) + w.beta * r.aux_dice + w.gamma_w * r.aux_focal;
    EXPECT_NEAR(r.total, recombined, 1e-6);
    EXPECT_NEAR(out.total.item(), recombined, 1e-6);
  }
}

TEST(Tdc, IdenticalPredictionsGiveZero) {
  TdcConfig cfg;
  const auto f = square_field(0.0);
  const auto r = tdc_from_predictions(f, f, {0}, cfg);
  EXPECT_EQ(r.l_topo, 0.0);
  for (double g : r.grad) EXPECT_EQ(g, 0.0);
}

TEST(Tdc, ExtraComponentCostsHalfItsPersistence) {
  TdcConfig cfg;
  for (double peak : {0.5, 0.7, 0.85}) {
    const auto r = tdc_from_predictions(square_field(peak), square_field(0.0), {0}, cfg);
    EXPECT_NEAR(r.l_topo, (peak - 0.1) / 2, 1e-12);
    EXPECT_NEAR(r.grad[6 * 8 + 6], 0.5, 1e-12);
  }
}

TEST(Tdc, SelectionSkipsShortTimesteps) {
  TdcConfig cfg;
  cfg.k = 5;
  cfg.samples = 2;
  std::size_t skipped = 0;
  const auto used = tdc_select({3, 10, 5, 6, 100, 200}, {0, 1, 2, 3, 4, 5}, cfg, skipped);
  EXPECT_EQ(used, (std::vector<std::size_t>{1, 3}));
  EXPECT_EQ(skipped, 2u);
}

TEST(Tdc, TermSkippedWhenLookBackPrecedesStart) {
  const auto sched = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02);
  TdcConfig cfg;
  cfg.k = 5;
  std::mt19937_64 rng(8);
  const auto x0 = binary_tensor({2, 1, 8, 8}, rng), eps = random_tensor<double>({2, 1, 8, 8}, rng),
             image = random_tensor<double>({2, 1, 8, 8}, rng);
  ZeroNoiseModel model;
  const auto r = tdc_term(model, x0, {5, 2}, eps, image, x0, sched, cfg, {0, 1});
  EXPECT_EQ(r.l_topo, 0.0);
  EXPECT_EQ(r.evaluated, 0u);
  EXPECT_EQ(r.skipped, 2u);
  EXPECT_EQ(model.calls, 0);
  const auto hybrid = zero_hybrid();
  EXPECT_EQ(enhanced_loss(hybrid, x0, r, 0.1, cfg).report.total, hybrid.report.total);
}

TEST(Tdc, LookBackUsesSameNoiseAtEarlierStep) {
  const auto sched = NoiseSchedule::build(ScheduleKind::Linear, 1000, 1e-4, 0.02);
  TdcConfig cfg;
  cfg.k = 5;
  std::mt19937_64 rng(9);
  const auto x0 = binary_tensor({1, 1, 8, 8}, rng), eps = random_tensor<double>({1, 1, 8, 8}, rng),
             image = random_tensor<double>({1, 1, 8, 8}, rng);
  ZeroNoiseModel model;
  // With eps_hat = 0 the implied clean mask at step s is x_s / sqrt(alpha_bar_s).
  const auto look = predict_x0(q_sample(x0, {15}, eps, sched), {15}, D({1, 1, 8, 8}, 0.0), sched);
  const auto current = clamp(predict_x0(q_sample(x0, {20}, eps, sched), {20}, D({1, 1, 8, 8}, 0.0), sched), 0.0, 1.0);
  const auto r = tdc_term(model, x0, {20}, eps, image, current, sched, cfg, {0});
  const auto expect = tdc_from_predictions(current, look, {0}, cfg);
  EXPECT_EQ(model.calls, 1);
  EXPECT_EQ(r.evaluated, 1u);
  EXPECT_DOUBLE_EQ(r.l_topo, expect.l_topo);
}

TEST(EnhancedLoss, LogDampedAddition) {
  TdcConfig cfg;
  const auto hybrid = zero_hybrid();
  auto cur = D({1, 1, 8, 8}, 0.5, true);
  TdcResult t;
  t.l_topo = std::exp(1.0) - 1.0;
  t.grad.assign(64, 0.0);
  const auto out = enhanced_loss(hybrid, cur, t, 0.1, cfg);
  EXPECT_NEAR(out.report.total - hybrid.report.total, 0.1, 1e-15);
  EXPECT_NEAR(out.total.item() - hybrid.total.item(), 0.1, 1e-12);
}

TEST(EnhancedLoss, EqualsHybridWhenTopologyOrWeightVanish) {
  TdcConfig cfg;
  const auto hybrid = zero_hybrid();
  auto cur = square_field(0.7);
  cur.set_requires_grad(true);
  const auto zero = tdc_from_predictions(square_field(0.0), square_field(0.0), {0}, cfg);
  auto a = enhanced_loss(hybrid, cur, zero, 0.1, cfg);
  EXPECT_EQ(a.report.total, hybrid.report.total);
  EXPECT_EQ(a.total.item(), hybrid.total.item());
  const auto nonzero = tdc_from_predictions(cur, square_field(0.0), {0}, cfg);
  ASSERT_GT(nonzero.l_topo, 0.0);
  auto b = enhanced_loss(hybrid, cur, nonzero, 0.0, cfg);
  EXPECT_EQ(b.report.total, hybrid.report.total);
  EXPECT_EQ(b.total.item(), hybrid.total.item());
  backward(b.total);
  if (cur.has_grad())
    for (double g : cur.grad()) EXPECT_EQ(g, 0.0);
}

TEST(EnhancedLoss, RoutedGradientMatchesFiniteDifferences) {
  TdcConfig cfg;
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 5; ++trial) {
    auto cur = random_tensor<double>({1, 1, 5, 5}, rng, 0.05, 0.95);
    const auto back = random_tensor<double>({1, 1, 5, 5}, rng, 0.05, 0.95);
    const double w = 0.1;
    const auto r = check_gradients<double>(
        {&cur},
        [&] {
          const auto tdc = tdc_from_predictions(cur, back, {0}, cfg);
          return enhanced_loss(zero_hybrid(), cur, tdc, w, cfg).total;
        },
        1e-7);
    EXPECT_LT(r.rel_error, 1e-3) << "trial " << trial;
  }
}

TEST(EnhancedLoss, DampingIsSublinear) {
  for (double l : {1e-6, 0.1, 1.0, 10.0}) EXPECT_LT(1.0 / (1.0 + l), 1.0);
  EXPECT_LT(std::log1p(10.0), 10.0);
}

TEST(TdcConfig, WeightSchedule) {
  TdcConfig cfg;
  cfg.w_max = 0.1;
  cfg.warmup_fraction = 0.2;
  cfg.ramp_fraction = 0.3;
  EXPECT_EQ(cfg.w_epoch(0, 10), 0.0);
  EXPECT_EQ(cfg.w_epoch(1, 10), 0.0);
  EXPECT_NEAR(cfg.w_epoch(2, 10), 0.1 / 3, 1e-15);
  EXPECT_NEAR(cfg.w_epoch(4, 10), 0.1, 1e-15);
  EXPECT_NEAR(cfg.w_epoch(9, 10), 0.1, 1e-15);
  cfg.k = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}
