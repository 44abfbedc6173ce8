#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dudo/feasibility.hpp"

using namespace dudo;

namespace {

// Window-level simulation that counts acquired lines with std::bernoulli_distribution, a
// different generator path from monte_carlo_feasibility.
double simulate(int k, double hit, std::uint64_t trials, std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::uint32_t>(seed));
  std::bernoulli_distribution line(hit);
  std::uint64_t ok = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    int got = 0;
    for (int i = 0; i < k; ++i) got += line(rng);
    ok += got >= 2;
  }
  return static_cast<double>(ok) / static_cast<double>(trials);
}

// P(at least 2 of k) summed term by term from the binomial pmf.
double binomial_tail(int k, double p_miss) {
  double total = 0;
  for (int m = 2; m <= k; ++m) {
    double c = 1;
    for (int i = 0; i < m; ++i) c = c * (k - i) / (i + 1);
    total += c * std::pow(1 - p_miss, m) * std::pow(p_miss, k - m);
  }
  return total;
}

}  // namespace

TEST(LineMiss, BoundaryValues) {
  EXPECT_EQ(line_miss_probability({2, 1.0, 0.125}), 0.0);
  EXPECT_EQ(line_miss_probability({2, 8.0, 0.125}), 1.0);
  EXPECT_NEAR(line_miss_probability({2, 4.0, 0.125}), 6.0 / 7.0, 1e-15);
}

TEST(LineMiss, ClampsWhenAcsExceedsBudget) {
  EXPECT_EQ(line_miss_probability({2, 10.0, 0.125}), 1.0);
  EXPECT_EQ(line_miss_probability({2, 0.5, 0.125}), 0.0);
}

TEST(LineMiss, RejectsBadParameters) {
  EXPECT_THROW(line_miss_probability({2, 0.0, 0.1}), ParameterError);
  EXPECT_THROW(line_miss_probability({2, 4.0, 1.0}), ParameterError);
}

TEST(Feasibility, BoundaryIdentities) {
  for (int k = 2; k <= 32; ++k) {
    EXPECT_EQ(feasibility_probability({k, 1.0, 0.125}), 1.0);
    EXPECT_EQ(feasibility_probability({k, 8.0, 0.125}), 0.0);
  }
}

TEST(Feasibility, ThreeLineWindowAtFourfold) {
  const double p = 6.0 / 7.0;
  const double expect = 1 - p * p * p - 3 * p * p * (1 - p);
  EXPECT_NEAR(feasibility_probability({3, 4.0, 0.125}), expect, 1e-15);
  EXPECT_NEAR(expect, 0.0554, 5e-5);
  EXPECT_NEAR(simulate(3, 1.0 / 7.0, 400000, 3), expect, 0.003);
}

TEST(Feasibility, MatchesBinomialTail) {
  for (int k = 2; k <= 32; k += 3)
    for (double a : {1.5, 2.0, 3.0, 5.0, 7.0}) {
      const FeasibilityQuery q{k, a, 0.125};
      EXPECT_NEAR(feasibility_probability(q), binomial_tail(k, line_miss_probability(q)), 1e-12);
    }
}

TEST(Feasibility, RejectsSingleLineWindow) {
  EXPECT_THROW(feasibility_probability({1, 4.0, 0.125}), ParameterError);
}

TEST(MonteCarlo, ExactAtBoundaries) {
  EXPECT_EQ(monte_carlo_feasibility({4, 1.0, 0.125}, 1000, 1), 1.0);
  EXPECT_EQ(monte_carlo_feasibility({4, 8.0, 0.125}, 1000, 1), 0.0);
}

TEST(MonteCarlo, AgreesWithFormulaAtMillionTrials) {
  const FeasibilityQuery q{3, 4.0, 0.125};
  EXPECT_LT(std::abs(monte_carlo_feasibility(q, 1000000, 17) - feasibility_probability(q)), 0.002);
}

TEST(MonteCarlo, DeterministicPerSeed) {
  const FeasibilityQuery q{6, 3.0, 0.125};
  EXPECT_EQ(monte_carlo_feasibility(q, 5000, 9), monte_carlo_feasibility(q, 5000, 9));
  EXPECT_THROW(monte_carlo_feasibility(q, 0, 9), ParameterError);
}

TEST(Grid, SingleCellReducesToFormula) {
  const auto g = feasibility_grid(5, 5, {3.0}, 0.125);
  ASSERT_EQ(g.size(), 1u);
  EXPECT_EQ(g[0].probability, feasibility_probability({5, 3.0, 0.125}));
}

TEST(Grid, RowMatchesPerCellEvaluation) {
  const auto g = feasibility_grid(2, 32, {1, 2, 3, 4, 5, 6, 7, 8}, 0.125);
  ASSERT_EQ(g.size(), 31u * 8u);
  for (const auto& c : g)
    if (c.accel == 4.0) {
      EXPECT_EQ(c.probability, feasibility_probability({c.window_k, 4.0, 0.125}));
    }
}

TEST(Grid, MonotoneInAccelAndWindow) {
  const std::vector<double> as{1, 2, 3, 4, 5, 6, 7, 8};
  for (int k = 2; k <= 32; ++k)
    for (std::size_t i = 1; i < as.size(); ++i)
      EXPECT_LE(feasibility_probability({k, as[i], 0.125}), feasibility_probability({k, as[i - 1], 0.125}));
  for (double a : as)
    for (int k = 3; k <= 32; ++k)
      EXPECT_GE(feasibility_probability({k, a, 0.125}), feasibility_probability({k - 1, a, 0.125}));
}

TEST(Grid, HighAccelerationSmallWindowsBelowHalf) {
  for (double a : {5.0, 6.0, 7.0, 8.0})
    for (int k = 2; k <= 8; ++k) EXPECT_LT(feasibility_probability({k, a, 0.125}), 0.5) << k << " " << a;
}

TEST(Grid, MinAccelBelowHalf) {
  const auto g = feasibility_grid(2, 32, {1, 2, 3, 4, 5, 6, 7, 8}, 0.125);
  const auto a = min_accel_below(g, 0.5);
  ASSERT_TRUE(a.has_value());
  EXPECT_EQ(*a, 6.0);
  EXPECT_FALSE(min_accel_below(feasibility_grid(2, 32, {1, 2}, 0.125), 0.5).has_value());
}

TEST(Grid, CellSeedsDifferAcrossCells) {
  EXPECT_NE(cell_seed(0, 2, 4.0), cell_seed(0, 3, 4.0));
  EXPECT_NE(cell_seed(0, 2, 4.0), cell_seed(0, 2, 5.0));
  EXPECT_EQ(cell_seed(7, 2, 4.0), cell_seed(7, 2, 4.0));
}
