#include <gtest/gtest.h>

#include <random>

#include "semidyn/twostage.hpp"

using namespace semidyn;

namespace {

std::vector<double> grid_points(double lo, double hi, int n) {
  std::vector<double> x(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k)
    x[static_cast<std::size_t>(k)] = lo + (hi - lo) * k / (n - 1);
  return x;
}

} // namespace

TEST(LocalPoly, ReproducesPolynomialsOfItsOrder) {
  const auto x = grid_points(0.0, 1.0, 21);
  std::vector<double> lin, quad;
  for (double v : x) {
    lin.push_back(2.0 - 3.0 * v);
    quad.push_back(1.0 + 0.5 * v - 4.0 * v * v);
  }
  const auto c1 = detail::local_poly(x, lin, 0.37, 0.2, 1);
  ASSERT_TRUE(c1);
  EXPECT_NEAR((*c1)[0], 2.0 - 3.0 * 0.37, 1e-12);
  EXPECT_NEAR((*c1)[1], -3.0, 1e-11);
  const auto c2 = detail::local_poly(x, quad, 0.37, 0.2, 2);
  ASSERT_TRUE(c2);
  EXPECT_NEAR((*c2)[0], 1.0 + 0.5 * 0.37 - 4.0 * 0.37 * 0.37, 1e-12);
  EXPECT_NEAR((*c2)[1], 0.5 - 8.0 * 0.37, 1e-10);
  EXPECT_FALSE(detail::local_poly(x, quad, 0.37, 0.04, 2)); // a single point in the window
}

TEST(LocalPoly, LeaveOneOutScoreIsZeroForExactData) {
  const auto x = grid_points(0.0, 1.0, 15);
  std::vector<double> y;
  for (double v : x)
    y.push_back(v * v);
  EXPECT_LT(detail::loo_score(x, y, 0.5, 2), 1e-24);
  EXPECT_TRUE(std::isinf(detail::loo_score(x, y, 0.01, 1)));
}

TEST(LocalPoly, BandwidthChoiceAvoidsGridEndsOnNoisyCurve) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> z(0.0, 0.05);
  const auto x = grid_points(0.0, 1.0, 80);
  std::vector<double> y;
  for (double v : x)
    y.push_back(std::sin(6.0 * v) + z(rng));
  const auto grid = geometric_grid(1.0);
  const auto best = detail::choose_bandwidth(x, y, grid, 1);
  EXPECT_TRUE(best.from_cv);
  EXPECT_LT(best.score, detail::loo_score(x, y, grid.back(), 1));
  EXPECT_GT(best.bw, grid.front());
  EXPECT_LT(best.bw, grid.back());
}

TEST(Presmooth, RecoversExponentialSlope) {
  const auto t = grid_points(0.0, 1.0, 40);
  std::vector<double> y;
  for (double v : t)
    y.push_back(0.3 * std::exp(v));
  const Presmoothed p = presmooth_curve(t, y, {0.5});
  EXPECT_NEAR(p.x_hat[0], 0.3 * std::exp(0.5), 2e-3);
  EXPECT_NEAR(p.xprime_hat[0], 0.3 * std::exp(0.5), 5e-3);
  EXPECT_THROW(presmooth_curve({0.0, 1.0}, {0.0, 1.0}, {0.5}), InvalidInput);
}

TEST(Stage2, BasisRegressionIsExactInsideTheSpan) {
  const SplineBasis b = SplineBasis::uniform_open(4);
  const Eigen::Vector4d beta(0.1, 1.2, 1.6, 0.4);
  std::vector<double> x = grid_points(0.1, 0.85, 30), y;
  for (double v : x)
    y.push_back(b.combine(beta, v));
  TwoStageOptions o;
  o.stage2 = Stage2Method::basis_regression;
  o.basis = b;
  const Stage2Fit f = stage2_fit(x, y, o);
  EXPECT_LT((f.beta - Eigen::VectorXd(beta)).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_THROW(stage2_fit({0.5, 0.5, 0.5, 0.5}, {1, 1, 1, 1}, o), ModelError);
  o.basis.reset();
  EXPECT_THROW(stage2_fit(x, y, o), InvalidInput);
}

TEST(Stage2, LocalQuadraticNeedsSpread) {
  TwoStageOptions o;
  EXPECT_THROW(stage2_fit({0.3}, {1.0}, o), ModelError);
  EXPECT_THROW(stage2_fit({0.3, 0.3, 0.3}, {1.0, 2.0, 3.0}, o), ModelError);
  std::vector<double> x = grid_points(0.0, 1.0, 25), y;
  for (double v : x)
    y.push_back(1.0 + v * v);
  const Stage2Fit f = stage2_fit(x, y, o);
  EXPECT_NEAR(f.value(0.45), 1.0 + 0.45 * 0.45, 1e-12);
}

TEST(TwoStage, SkipsShortCurvesAndWarns) {
  Dataset ds;
  Subject s{"S", {}};
  const auto t = grid_points(0.0, 1.0, 12);
  for (int l = 0; l < 4; ++l) {
    Curve c{"C" + std::to_string(l), t, {}};
    for (double v : t)
      c.values.push_back((0.2 + 0.05 * l) * std::exp(v));
    s.curves.push_back(c);
  }
  s.curves.push_back(Curve{"short", {0.1, 0.9}, {0.2, 0.4}});
  ds.subjects.push_back(s);
  const TwoStageResult r = two_stage(ds, {});
  EXPECT_EQ(r.smoothed, 4u);
  EXPECT_EQ(r.skipped, 1u);
  ASSERT_FALSE(r.warnings.empty());
  // X' = X, so the pooled regression should be close to the identity.
  EXPECT_NEAR(r.value(0.4), 0.4, 0.02);
  TwoStageOptions three;
  three.threads = 3;
  EXPECT_EQ(two_stage(ds, three).value(0.4), r.value(0.4));
}

TEST(RegionIse, ConstantOffset) {
  const auto ise = region_ise([](double x) { return x + 0.1; }, [](double x) { return x; }, default_regions());
  ASSERT_EQ(ise.size(), 3u);
  EXPECT_NEAR(ise[0], 0.01 * 0.7, 1e-14);
  EXPECT_NEAR(ise[1], 0.01 * 0.8, 1e-14);
  EXPECT_NEAR(ise[2], 0.01 * 0.5, 1e-14);
  EXPECT_THROW(region_ise([](double) { return 0.0; }, [](double) { return 0.0; }, {{1.0, 1.0, "x"}}),
               InvalidInput);
}

TEST(RegionIse, MatchesDirectTrapezoid) {
  auto gh = [](double x) { return std::sin(3.0 * x); };
  auto gt = [](double x) { return x * x; };
  const auto ise = region_ise(gh, gt, {{0.2, 1.0, "r"}});
  const int n = 1600;
  double sum = 0.0;
  for (int k = 0; k <= n; ++k) {
    const double x = 0.2 + 0.8 * k / n;
    const double d = gh(x) - gt(x);
    sum += (k == 0 || k == n ? 0.5 : 1.0) * d * d;
  }
  sum *= 0.8 / n;
  EXPECT_NEAR(ise[0], sum, 1e-12);
}

TEST(RegionIse, AdditiveOverAdjacentRegions) {
  auto gh = [](double x) { return std::exp(x); };
  auto gt = [](double) { return 1.0; };
  const auto parts = region_ise(gh, gt, {{0.2, 0.6, "a"}, {0.6, 1.0, "b"}});
  const auto whole = region_ise(gh, gt, {{0.2, 1.0, "w"}});
  EXPECT_NEAR(parts[0] + parts[1], whole[0], 1e-12);
}
