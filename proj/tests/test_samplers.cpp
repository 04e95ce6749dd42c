#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "maskflow/samplers.hpp"

using namespace maskflow;

namespace {

std::vector<double> draw(int n, Rng rng, auto&& fn) {
  std::vector<double> out(static_cast<std::size_t>(n));
  for (auto& t : out) t = fn(rng);
  return out;
}

double trapezoid(const std::vector<DensityRow>& rows) {
  double s = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) s += 0.5 * (rows[i].pdf + rows[i - 1].pdf) * (rows[i].t - rows[i - 1].t);
  return s;
}

}  // namespace

TEST(GenSampler, LogisticAnchors) {
  EXPECT_DOUBLE_EQ(logistic(0.0), 0.5);
  EXPECT_NEAR(logistic(40.0), 1.0, 1e-15);
}

TEST(GenSampler, PdfPeakAndSymmetry) {
  EXPECT_NEAR(pdf_gen(0.5), 4.0 / std::sqrt(2.0 * std::numbers::pi), 1e-12);
  EXPECT_NEAR(pdf_gen(0.5), 1.5958, 1e-3);
  for (double t : {0.01, 0.2, 0.37, 0.49}) EXPECT_NEAR(pdf_gen(t), pdf_gen(1.0 - t), 1e-12);
  EXPECT_THROW(pdf_gen(0.0), std::domain_error);
  EXPECT_THROW(pdf_gen(1.0), std::domain_error);
}

TEST(GenSampler, PdfIntegratesToOne) {
  // Midpoint quadrature, 1e5 panels.
  const int n = 100000;
  double s = 0;
  for (int i = 0; i < n; ++i) s += pdf_gen((i + 0.5) / n) / n;
  EXPECT_NEAR(s, 1.0, 1e-6);
}

TEST(GenSampler, KolmogorovSmirnovAgainstLogitNormal) {
  const auto xs = draw(100000, Rng(1, 10), [](Rng& r) { return sample_gen(r); });
  for (double t : xs) ASSERT_TRUE(t > 0.0 && t < 1.0);
  EXPECT_LT(ks_statistic(xs, [](double t) { return std_normal_cdf(std::log(t / (1 - t))); }), 0.01);
}

TEST(SegSampler, MedianDraw) {
  const SegSampler s(0.05);
  EXPECT_NEAR(*s.from_uniform(0.5), 0.95, 1e-15);
}

TEST(SegSampler, TenPercentBelowPointEightFive) {
  EXPECT_NEAR(cdf_seg(0.05, 0.85), 0.100, 1e-6);
  EXPECT_NEAR(1.0 - 0.15 * 0.15 / (0.15 * 0.15 + 0.0025), 0.1, 1e-12);
}

TEST(SegSampler, PeakValueAndLocation) {
  const SegSampler s(0.05);
  EXPECT_NEAR(s.peak_t(), 1.0 - 0.05 / std::sqrt(3.0), 1e-15);
  EXPECT_NEAR(s.pdf(s.peak_t()), 9.0 / (8.0 * std::sqrt(3.0) * 0.05), 1e-9);
  EXPECT_NEAR(s.pdf(s.peak_t()), 12.990, 0.01);
  // Brute-force maximum over a fine grid agrees with the closed form.
  double best = 0;
  for (int i = 0; i <= 1000000; ++i) best = std::max(best, s.pdf(i / 1e6));
  EXPECT_NEAR(best, s.pdf(s.peak_t()), 1e-6);
  EXPECT_NEAR(s.pdf(s.peak_t()) / pdf_gen(0.5), 8.14, 0.01);
}

TEST(SegSampler, NormalizedCdfReachesOne) {
  for (double a : {0.05, 0.1, 0.5, 3.0}) {
    EXPECT_NEAR(cdf_seg(a, 1.0, true), 1.0, 1e-15);
    EXPECT_NEAR(cdf_seg(a, 0.0, true), 0.0, 1e-15);
  }
}

TEST(SegSampler, KolmogorovSmirnovAgainstTruncatedCdf) {
  const SegSampler s(0.05);
  const auto xs = draw(100000, Rng(2, 11), [&](Rng& r) { return s.sample(r); });
  for (double t : xs) ASSERT_TRUE(t >= 0.0 && t <= 1.0);
  EXPECT_LT(ks_statistic(xs, [&](double t) { return s.cdf(t, true); }), 0.01);
}

TEST(SegSampler, MassConcentratesNearPureNoise) {
  const SegSampler s(0.05);
  const auto xs = draw(100000, Rng(3, 12), [&](Rng& r) { return s.sample(r); });
  const double frac = static_cast<double>(std::count_if(xs.begin(), xs.end(), [](double t) { return t >= 0.85; })) / xs.size();
  EXPECT_NEAR(frac, 0.90, 0.01);
}

TEST(SegSampler, InverseTransformConsistency) {
  const SegSampler s(0.05);
  int accepted = 0;
  for (int i = 0; i < 1000; ++i) {
    const double u = (i + 0.5) / 1000.0;
    if (auto t = s.from_uniform(u)) {
      ++accepted;
      EXPECT_NEAR(s.cdf(*t, true), 1.0 - u * (1.0 + s.a * s.a), 1e-9);
    }
    const double q = (i + 0.5) / 1000.0;
    EXPECT_NEAR(s.cdf(s.quantile(q), true), q, 1e-9);
  }
  EXPECT_GT(accepted, 990);
}

// As a grows the truncated density in s tends to 2s on [0, 1], i.e. 2(1 - t):
// the peak flattens into a linear ramp rather than a uniform law.
TEST(SegSampler, LargeShiftFlattensTowardLinearRamp) {
  const SegSampler s(10.0);
  const auto xs = draw(100000, Rng(4, 13), [&](Rng& r) { return s.sample(r); });
  EXPECT_LT(ks_statistic(xs, [](double t) { return 1.0 - (1.0 - t) * (1.0 - t); }), 0.05);
  // The closed-form distance to uniform converges to max |s^2 - s| = 1/4.
  EXPECT_NEAR(ks_statistic(xs, [](double t) { return t; }), 0.25, 0.01);
  EXPECT_LT(s.pdf(s.peak_t(), true), 2.0 + 1e-9);
}

TEST(SegSampler, RejectsBadArguments) {
  EXPECT_THROW(SegSampler(0.0), std::invalid_argument);
  EXPECT_THROW(SegSampler(-1.0), std::invalid_argument);
  EXPECT_THROW(pdf_seg(0.05, 1.5), std::domain_error);
  EXPECT_THROW(cdf_seg(0.05, -0.1), std::domain_error);
}

TEST(DensityTable, CurvesAreNormalizedAndOrdered) {
  const auto grid = uniform_grid(1000);
  double prev_peak = 1e300;
  for (double a : {0.05, 0.1, 0.5}) {
    const auto rows = density_table(SamplerKind::segmentation, a, grid);
    ASSERT_EQ(rows.size(), 1000u);
    double peak = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      peak = std::max(peak, rows[i].pdf);
      if (i) EXPECT_GE(rows[i].cdf, rows[i - 1].cdf);
    }
    EXPECT_LT(peak, prev_peak);
    prev_peak = peak;
    EXPECT_NEAR(trapezoid(rows), 1.0, 1e-3) << a;
    EXPECT_NEAR(rows.back().cdf, 1.0, 1e-9);
  }
  const auto gen = density_table(SamplerKind::generation, 0.0, uniform_grid(1001));
  const auto top = std::max_element(gen.begin(), gen.end(), [](auto& x, auto& y) { return x.pdf < y.pdf; });
  EXPECT_DOUBLE_EQ(top->t, 0.5);
  EXPECT_NEAR(trapezoid(gen), 1.0, 1e-3);
  EXPECT_NEAR(gen.back().cdf, 1.0, 1e-9);
  EXPECT_THROW(density_table(SamplerKind::generation, 0.0, {}), std::invalid_argument);
}
