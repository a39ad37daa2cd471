#include <gtest/gtest.h>

#include <random>

#include "topodiff/transport.hpp"

using namespace topodiff;

namespace {

PersistencePoint pt(double b, double d, int dim = 0, bool essential = false) {
  PersistencePoint p;
  p.dim = dim;
  p.birth = b;
  p.death = d;
  p.essential = essential;
  if (!essential) p.death_cell = Cell{0, 0};
  return p;
}

PersistenceDiagram dg(std::vector<PersistencePoint> pts) { return PersistenceDiagram{std::move(pts)}; }

// Values on a 1/64 grid keep sums exact in binary floating point.
PersistenceDiagram random_diagram(std::mt19937_64& rng, int max_per_dim, bool with_essential) {
  std::uniform_int_distribution<int> count(0, max_per_dim), q(0, 64);
  PersistenceDiagram d;
  for (int dim : {0, 1}) {
    const int n = count(rng);
    for (int i = 0; i < n; ++i) {
      int a = q(rng), b = q(rng);
      if (a < b) std::swap(a, b);
      d.points.push_back(pt(a / 64.0, b / 64.0, dim));
    }
  }
  if (with_essential) d.points.push_back(pt(q(rng) / 64.0, 0.0, 0, true));
  return d;
}

}  // namespace

TEST(Transport, IdenticalDiagramsCostZeroWithIdentityMatching) {
  const auto d = dg({pt(1.0, 0.0), pt(0.7, 0.2), pt(0.9, 0.3, 1), pt(1.0, 0.0, 0, true)});
  const auto m = w1_distance(d, d);
  EXPECT_EQ(m.cost, 0.0);
  for (const auto& p : m.pairs) EXPECT_EQ(p.a, p.b);
}

TEST(Transport, SinglePointToDiagonal) {
  EXPECT_EQ(w1_distance(dg({pt(1.0, 0.0)}), dg({})).cost, 0.5);
  EXPECT_EQ(brute_force_w1(dg({pt(1.0, 0.0)}), dg({})), 0.5);
}

TEST(Transport, DirectMatchBeatsDiagonal) {
  const auto a = dg({pt(2.0, 0.0)}), b = dg({pt(1.0, 0.0)});
  EXPECT_EQ(w1_distance(a, b).cost, 1.0);
  EXPECT_EQ(brute_force_w1(a, b), 1.0);
}

TEST(Transport, ThreePointEnumeration) {
  const auto a = dg({pt(1.0, 0.0), pt(0.6, 0.0)}), b = dg({pt(0.9, 0.0)});
  // Options: (1.0->0.9) + diag(0.6) = 0.1 + 0.3 ; (0.6->0.9) + diag(1.0) = 0.3 + 0.5 ; all diagonal = 0.5+0.3+0.45.
  EXPECT_NEAR(brute_force_w1(a, b), 0.4, 1e-15);
  EXPECT_EQ(w1_distance(a, b).cost, brute_force_w1(a, b));
}

TEST(Transport, EmptyDiagrams) {
  EXPECT_EQ(w1_distance(dg({}), dg({})).cost, 0.0);
  EXPECT_EQ(brute_force_w1(dg({}), dg({})), 0.0);
}

TEST(Transport, DimensionsAreKeptApart) {
  const auto a = dg({pt(1.0, 0.0, 0)}), b = dg({pt(1.0, 0.0, 1)});
  EXPECT_EQ(w1_distance(a, b).cost, 1.0);
  EXPECT_EQ(w1_distance(a, b, DimensionSelection{true, false}).cost, 0.5);
  EXPECT_EQ(w1_distance(a, b, DimensionSelection{false, true}).cost, 0.5);
}

TEST(Transport, EssentialPointsMatchByBirth) {
  const auto a = dg({pt(0.9, 0.1, 0, true)}), b = dg({pt(0.6, 0.0, 0, true)});
  EXPECT_NEAR(w1_distance(a, b).cost, 0.3, 1e-15);
}

TEST(Transport, MatchesBruteForceOnRandomPairs) {
  std::mt19937_64 rng(1234);
  for (int trial = 0; trial < 600; ++trial) {
    const auto a = random_diagram(rng, 4, true), b = random_diagram(rng, 4, true);
    const auto m = w1_distance(a, b);
    ASSERT_EQ(m.cost, brute_force_w1(a, b)) << "trial " << trial;
  }
}

TEST(Transport, MatchingCoversEveryPointOnce) {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_diagram(rng, 6, true), b = random_diagram(rng, 6, true);
    const auto m = w1_distance(a, b);
    std::vector<int> ca(a.points.size(), 0), cb(b.points.size(), 0);
    std::vector<double> costs;
    for (const auto& p : m.pairs) {
      if (p.a != kDiagonal) ++ca[static_cast<std::size_t>(p.a)];
      if (p.b != kDiagonal) ++cb[static_cast<std::size_t>(p.b)];
      EXPECT_GE(p.cost, 0.0);
      costs.push_back(p.cost);
    }
    for (int c : ca) EXPECT_EQ(c, 1);
    for (int c : cb) EXPECT_EQ(c, 1);
    EXPECT_EQ(canonical_sum(costs), m.cost);
  }
}

TEST(Transport, MetricAxioms) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_diagram(rng, 3, true), b = random_diagram(rng, 3, true), c = random_diagram(rng, 3, true);
    const double ab = w1_distance(a, b).cost, ba = w1_distance(b, a).cost;
    EXPECT_GE(ab, 0.0);
    EXPECT_NEAR(ab, ba, 1e-9);
    EXPECT_NEAR(w1_distance(a, a).cost, 0.0, 1e-9);
    EXPECT_LE(ab, w1_distance(a, c).cost + w1_distance(c, b).cost + 1e-9);
  }
}

TEST(Transport, DiagonalDominance) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_diagram(rng, 6, false), b = random_diagram(rng, 6, false);
    double bound = 0;
    for (const auto& p : a.points) bound += diagonal_distance(p);
    for (const auto& p : b.points) bound += diagonal_distance(p);
    EXPECT_LE(w1_distance(a, b).cost, bound + 1e-12);
  }
}

TEST(Transport, ScaleEquivariance) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    auto a = random_diagram(rng, 5, true), b = random_diagram(rng, 5, true);
    const double base = w1_distance(a, b).cost;
    for (double s : {0.5, 2.0, 4.0}) {
      auto sa = a, sb = b;
      for (auto& p : sa.points) p.birth *= s, p.death *= s;
      for (auto& p : sb.points) p.birth *= s, p.death *= s;
      EXPECT_EQ(w1_distance(sa, sb).cost, s * base);
    }
    const double s = 0.3;
    for (auto& p : a.points) p.birth *= s, p.death *= s;
    for (auto& p : b.points) p.birth *= s, p.death *= s;
    EXPECT_NEAR(w1_distance(a, b).cost, s * base, 1e-12);
  }
}

TEST(Transport, TiesResolveToLexicographicallySmallestPairing) {
  // Both B points are at distance 0.1 from A's point; the first one wins.
  const auto a = dg({pt(0.5, 0.2)}), b = dg({pt(0.6, 0.3), pt(0.4, 0.1)});
  const auto m = w1_distance(a, b);
  bool found = false;
  for (const auto& p : m.pairs)
    if (p.a == 0) {
      EXPECT_EQ(p.b, 0);
      found = true;
    }
  EXPECT_TRUE(found);
  const auto again = w1_distance(a, b);
  ASSERT_EQ(again.pairs.size(), m.pairs.size());
  for (std::size_t i = 0; i < m.pairs.size(); ++i) {
    EXPECT_EQ(again.pairs[i].a, m.pairs[i].a);
    EXPECT_EQ(again.pairs[i].b, m.pairs[i].b);
  }
}

TEST(Transport, OracleRejectsLargeInputs) {
  PersistenceDiagram a, b;
  for (int i = 0; i < 5; ++i) a.points.push_back(pt(0.9, 0.1 * i));
  for (int i = 0; i < 4; ++i) b.points.push_back(pt(0.8, 0.1 * i));
  EXPECT_THROW(brute_force_w1(a, b), OracleSizeError);
}

TEST(Transport, GradientMatchesFiniteDifferencesAwayFromTies) {
  const auto a = dg({pt(0.9, 0.2), pt(0.5, 0.4), pt(0.8, 0.3, 1), pt(1.0, 0.0, 0, true)});
  const auto b = dg({pt(0.85, 0.1), pt(0.72, 0.25, 1), pt(0.95, 0.0, 0, true)});
  const auto m = w1_distance(a, b);
  const auto g = w1_gradient_wrt_a(a, b, m);
  const double h = 1e-6;
  for (std::size_t i = 0; i < a.points.size(); ++i) {
    for (int which : {0, 1}) {
      if (which == 1 && a.points[i].essential) continue;
      auto up = a, down = a;
      (which ? up.points[i].death : up.points[i].birth) += h;
      (which ? down.points[i].death : down.points[i].birth) -= h;
      const double fd = (w1_distance(up, b).cost - w1_distance(down, b).cost) / (2 * h);
      EXPECT_NEAR(which ? g[i].d_death : g[i].d_birth, fd, 1e-6) << "point " << i << " part " << which;
    }
  }
}
