#include <gtest/gtest.h>

#include <random>

#include "support/oracles.hpp"
#include "topodiff/metrics.hpp"

using namespace topodiff;

namespace {

BinaryMask block(std::size_t h, std::size_t w, std::size_t r0, std::size_t c0, std::size_t bh, std::size_t bw) {
  BinaryMask m(h, w);
  for (std::size_t r = r0; r < r0 + bh; ++r)
    for (std::size_t c = c0; c < c0 + bw; ++c) m.set(r, c);
  return m;
}

BinaryMask random_mask(std::size_t h, std::size_t w, double p, std::mt19937_64& rng) {
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (auto& v : m.bits) v = b(rng) ? 1 : 0;
  return m;
}

BinaryMask translate(const BinaryMask& m, long dr, long dc, std::size_t h, std::size_t w) {
  BinaryMask out(h, w);
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c)
      if (m.at(r, c)) out.set(static_cast<std::size_t>(static_cast<long>(r) + dr), static_cast<std::size_t>(static_cast<long>(c) + dc));
  return out;
}

}  // namespace

TEST(Overlap, HandCountedBlocks) {
  const auto a = block(6, 6, 1, 1, 2, 2), b = block(6, 6, 1, 2, 2, 2);
  EXPECT_DOUBLE_EQ(dice_score(a, b), 0.5);
  EXPECT_DOUBLE_EQ(iou_score(a, b), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(dice_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou_score(a, a), 1.0);
  EXPECT_DOUBLE_EQ(dice_score(a, block(6, 6, 4, 4, 2, 2)), 0.0);
  EXPECT_DOUBLE_EQ(dice_score(BinaryMask(4, 4), BinaryMask(4, 4)), 1.0);
  EXPECT_DOUBLE_EQ(iou_score(BinaryMask(4, 4), BinaryMask(4, 4)), 1.0);
  EXPECT_THROW(dice_score(BinaryMask(4, 4), BinaryMask(4, 5)), DimensionError);
}

TEST(Overlap, DiceIouIdentity) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_mask(9, 7, 0.4, rng), b = random_mask(9, 7, 0.4, rng);
    const double d = dice_score(a, b);
    EXPECT_NEAR(d / (2 - d), iou_score(a, b), 1e-9);
  }
}

TEST(Hd95, HandValues) {
  BinaryMask a(8, 12), b(8, 12);
  a.set(3, 2);
  b.set(3, 7);
  EXPECT_DOUBLE_EQ(*hd95(a, b), 5.0);
  const auto blk = block(10, 10, 2, 2, 4, 5);
  EXPECT_DOUBLE_EQ(*hd95(blk, blk), 0.0);
  EXPECT_FALSE(hd95(BinaryMask(5, 5), block(5, 5, 1, 1, 2, 2)).has_value());
  EXPECT_FALSE(hd95(block(5, 5, 1, 1, 2, 2), BinaryMask(5, 5)).has_value());
}

TEST(Hd95, BoundedByHausdorffAndSymmetric) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_mask(12, 10, 0.3, rng), b = random_mask(12, 10, 0.3, rng);
    if (a.empty() || b.empty()) continue;
    EXPECT_LE(*hd95(a, b), *hausdorff(a, b));
    EXPECT_EQ(*hd95(a, b), *hd95(b, a));
  }
}

TEST(Hd95, MatchesBruteForcePooledPercentile) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = random_mask(14, 11, 0.35, rng), b = random_mask(14, 11, 0.35, rng);
    if (a.empty() || b.empty()) continue;
    const auto ba = boundary(a), bb = boundary(b);
    const auto da = topodiff::testing::brute_force_distance(ba), db = topodiff::testing::brute_force_distance(bb);
    std::vector<double> pooled;
    for (std::size_t i = 0; i < ba.bits.size(); ++i)
      if (ba.bits[i]) pooled.push_back(db[i]);
    for (std::size_t i = 0; i < bb.bits.size(); ++i)
      if (bb.bits[i]) pooled.push_back(da[i]);
    std::sort(pooled.begin(), pooled.end());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(pooled.size())));
    EXPECT_DOUBLE_EQ(*hd95(a, b), pooled[rank - 1]);
  }
}

TEST(Hd95, TranslationInvariance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = random_mask(10, 10, 0.4, rng), b = random_mask(10, 10, 0.4, rng);
    if (a.empty() || b.empty()) continue;
    const auto ta = translate(a, 3, 5, 16, 18), tb = translate(b, 3, 5, 16, 18);
    const auto pa = translate(a, 0, 0, 16, 18), pb = translate(b, 0, 0, 16, 18);
    EXPECT_DOUBLE_EQ(dice_score(ta, tb), dice_score(pa, pb));
    EXPECT_DOUBLE_EQ(iou_score(ta, tb), iou_score(pa, pb));
    // Moving both masks away from the grid edge must not change boundary geometry
    // once both are interior.
    const auto ua = translate(a, 4, 6, 18, 20), ub = translate(b, 4, 6, 18, 20);
    const auto va = translate(a, 5, 7, 18, 20), vb = translate(b, 5, 7, 18, 20);
    EXPECT_DOUBLE_EQ(*hd95(ua, ub), *hd95(va, vb));
  }
}

TEST(DistanceTransform, MatchesBruteForce) {
  std::mt19937_64 rng(5);
  for (std::size_t n : {1u, 5u, 13u, 24u}) {
    for (double p : {0.02, 0.2, 0.6}) {
      const auto m = random_mask(n, n == 24 ? 17 : n, p, rng);
      if (m.empty()) continue;
      const auto fast = distance_transform(m);
      const auto slow = topodiff::testing::brute_force_distance(m);
      for (std::size_t i = 0; i < fast.size(); ++i) EXPECT_NEAR(fast[i], slow[i], 1e-12) << "n " << n << " i " << i;
    }
  }
}

TEST(Boundary, FourNeighbourErosion) {
  const auto blk = block(7, 7, 1, 1, 5, 5);
  const auto b = boundary(blk);
  EXPECT_EQ(b.count(), 16u);
  EXPECT_FALSE(b.at(3, 3));
  EXPECT_TRUE(b.at(1, 3));
  const auto full = block(3, 3, 0, 0, 3, 3);
  EXPECT_EQ(boundary(full).count(), 8u);
}

TEST(Summary, ExcludesUndefinedHd95) {
  std::vector<EvalResult> rows{{0.8, 0.6, 2.0}, {0.6, 0.4, std::nullopt}, {1.0, 1.0, 4.0}};
  const auto s = summarize(rows);
  EXPECT_NEAR(s.dice, 0.8, 1e-15);
  EXPECT_NEAR(s.iou, 2.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(s.hd95, 3.0);
  EXPECT_EQ(s.hd95_undefined, 1u);
  EXPECT_EQ(s.count, 3u);
  EXPECT_TRUE(std::isnan(summarize({{0.1, 0.1, std::nullopt}}).hd95));
}
