#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "dudo/fourier.hpp"
#include "oracles.hpp"

using namespace dudo;
using cd = std::complex<double>;

namespace {

std::vector<cd> as_vec(const ComplexTensor<double>& t) { return {t.data().begin(), t.data().end()}; }

double l2(const ComplexTensor<double>& t) {
  double s = 0;
  for (const auto& v : t.data()) s += std::norm(v);
  return std::sqrt(s);
}

}  // namespace

TEST(Fft2c, CenteredImpulseGivesFlatSpectrum) {
  for (std::size_t n : {4u, 8u, 6u, 7u}) {
    ComplexTensor<double> x({n, n + 2});
    x[(n / 2) * (n + 2) + (n + 2) / 2] = 1.0;
    const auto k = fft2c(x);
    const double expect = 1.0 / std::sqrt(static_cast<double>(n * (n + 2)));
    for (const auto& v : k.data()) {
      EXPECT_NEAR(std::abs(v), expect, 1e-12);
      EXPECT_NEAR(v.imag(), 0.0, 1e-12);
    }
  }
}

TEST(Fft2c, ZerosStayZero) {
  const auto k = fft2c(ComplexTensor<double>({8, 8}));
  for (const auto& v : k.data()) EXPECT_EQ(v, cd(0.0));
}

TEST(Fft2c, MatchesDirectSumOracle) {
  for (auto [h, w] : std::vector<std::pair<std::size_t, std::size_t>>{{8, 8}, {5, 6}, {7, 3}, {16, 4}}) {
    const auto x = oracle::random_complex({h, w}, 11 + h * w);
    EXPECT_LT(oracle::max_rel_diff(as_vec(fft2c(x)), oracle::centered_dft2(as_vec(x), h, w, -1)), 1e-10)
        << h << "x" << w;
    EXPECT_LT(oracle::max_rel_diff(as_vec(ifft2c(x)), oracle::centered_dft2(as_vec(x), h, w, +1)), 1e-10)
        << h << "x" << w;
  }
}

TEST(Fft2c, BatchedPlanesTransformIndependently) {
  const auto x = oracle::random_complex({3, 2, 8, 4}, 5);
  const auto k = fft2c(x);
  for (std::size_t p = 0; p < 6; ++p) {
    std::vector<cd> plane(x.plane(p).begin(), x.plane(p).end());
    std::vector<cd> got(k.plane(p).begin(), k.plane(p).end());
    EXPECT_LT(oracle::max_rel_diff(got, oracle::centered_dft2(plane, 8, 4, -1)), 1e-10);
  }
}

TEST(Ifft2c, ConstantFieldGivesCenteredImpulse) {
  const std::size_t h = 8, w = 8;
  const cd c(2.5, -1.0);
  ComplexTensor<double> x({h, w});
  for (auto& v : x.data()) v = c;
  const auto img = ifft2c(x);
  for (std::size_t i = 0; i < h * w; ++i) {
    const cd expect = i == (h / 2) * w + w / 2 ? c * std::sqrt(double(h * w)) : cd(0.0);
    EXPECT_NEAR(std::abs(img[i] - expect), 0.0, 1e-12);
  }
}

TEST(Fft2c, RoundTripBothDirections) {
  for (std::size_t n : {16u, 15u}) {
    const auto x = oracle::random_complex({n, n}, 21);
    const auto a = ifft2c(fft2c(x)), b = fft2c(ifft2c(x));
    for (std::size_t i = 0; i < x.size(); ++i) {
      EXPECT_LT(std::abs(a[i] - x[i]), 1e-6);
      EXPECT_LT(std::abs(b[i] - x[i]), 1e-6);
    }
  }
}

TEST(Fft2c, ParsevalAcrossSizes) {
  for (std::size_t n : {8u, 16u, 32u, 64u}) {
    const auto x = oracle::random_complex({n, n}, n);
    EXPECT_NEAR(l2(fft2c(x)) / l2(x), 1.0, 1e-6) << n;
  }
}

TEST(Fft2c, Linearity) {
  const auto x = oracle::random_complex({16, 16}, 1), y = oracle::random_complex({16, 16}, 2);
  const cd alpha(0.7, -1.3), beta(-2.0, 0.25);
  ComplexTensor<double> mix({16, 16});
  for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * x[i] + beta * y[i];
  const auto lhs = fft2c(mix), fx = fft2c(x), fy = fft2c(y);
  std::vector<cd> rhs(mix.size());
  for (std::size_t i = 0; i < mix.size(); ++i) rhs[i] = alpha * fx[i] + beta * fy[i];
  EXPECT_LT(oracle::max_rel_diff(as_vec(lhs), rhs), 1e-6);
}

TEST(Fft2c, RejectsNonSpatialInput) {
  EXPECT_THROW(ComplexTensor<double>({8}), ShapeError);
  EXPECT_THROW(ComplexTensor<double>({1, 1, 1, 2, 2}), ShapeError);
}

TEST(Fft2c, FloatPathAgreesWithDouble) {
  const auto x = oracle::random_complex({32, 32}, 9);
  const auto kf = fft2c(x.cast<float>());
  const auto kd = fft2c(x);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(std::abs(cd(kf[i]) - kd[i]), 0.0, 1e-5);
}

TEST(Mask, DeskPresetCounts) {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const auto m = make_cartesian_mask(64, 4.0, 0.125, seed);
    EXPECT_EQ(m.acquired(), 16u);
    for (std::size_t y = 28; y < 36; ++y) EXPECT_TRUE(m[y]) << y;
  }
}

TEST(Mask, FullSamplingAndAcsOnly) {
  EXPECT_EQ(make_cartesian_mask(64, 1.0, 0.125, 3).acquired(), 64u);
  const auto m = make_cartesian_mask(64, 8.0, 0.125, 3);
  EXPECT_EQ(m.acquired(), 8u);
  for (std::size_t y = 0; y < 64; ++y) EXPECT_EQ(m[y], y >= 28 && y < 36);
}

TEST(Mask, DeterministicPerSeed) {
  EXPECT_EQ(make_cartesian_mask(96, 5.0, 0.1, 42), make_cartesian_mask(96, 5.0, 0.1, 42));
  EXPECT_NE(make_cartesian_mask(96, 5.0, 0.1, 42).lines, make_cartesian_mask(96, 5.0, 0.1, 43).lines);
}

TEST(Mask, InvariantsHoldOnSweep) {
  for (std::size_t h : {4u, 5u, 16u, 33u, 64u, 100u}) {
    for (double a : {1.0, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0}) {
      for (double r : {0.0, 0.05, 0.1, 0.125}) {
        if (r > 1.0 / a) continue;
        const auto m = make_cartesian_mask(h, a, r, h * 31 + static_cast<std::uint64_t>(a * 10));
        const std::size_t acs = static_cast<std::size_t>(std::lround(r * h));
        const std::size_t budget = static_cast<std::size_t>(std::lround(h / a));
        EXPECT_EQ(m.acquired(), std::max(budget, acs)) << h << " " << a << " " << r;
        const std::size_t start = h / 2 - acs / 2;
        for (std::size_t y = start; y < start + acs; ++y) EXPECT_TRUE(m[y]);
      }
    }
  }
}

TEST(Mask, OddHeightCentersBlockOnFloorHalf) {
  const auto m = make_cartesian_mask(9, 9.0 / 3.0, 3.0 / 9.0, 0);
  EXPECT_TRUE(m[3] && m[4] && m[5]);
}

TEST(Mask, RejectsBadParameters) {
  EXPECT_THROW(make_cartesian_mask(3, 2.0, 0.0, 0), ParameterError);
  EXPECT_THROW(make_cartesian_mask(64, 0.5, 0.0, 0), ParameterError);
  EXPECT_THROW(make_cartesian_mask(64, 8.0, 0.25, 0), ParameterError);
}

TEST(Mask, SerializationRoundTrips) {
  const auto m = make_cartesian_mask(64, 4.0 / 3.0, 0.1, 12345678901234ULL);
  const std::string line = m.serialize();
  EXPECT_EQ(SamplingMask::parse(line), m);
  EXPECT_EQ(SamplingMask::parse(line + "\n").serialize(), line);
  EXPECT_THROW(SamplingMask::parse("8,2,0,0,0101"), FormatError);
  EXPECT_THROW(SamplingMask::parse("4,2,0,0,01x1"), FormatError);
}

TEST(Undersample, FullMaskIsIdentity) {
  const auto k = oracle::random_complex({2, 16, 8}, 4);
  EXPECT_EQ(undersample(k, make_cartesian_mask(16, 1.0, 0.125, 0)), k);
}

TEST(Undersample, AcsOnlyZeroesOutsideBlock) {
  const auto k = oracle::random_complex({16, 8}, 4);
  const auto out = undersample(k, make_cartesian_mask(16, 8.0, 0.125, 0));
  for (std::size_t y = 0; y < 16; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      if (y == 7 || y == 8) {
        EXPECT_EQ(out[y * 8 + x], k[y * 8 + x]);
      } else {
        EXPECT_EQ(out[y * 8 + x], cd(0.0));
      }
    }
}

TEST(Undersample, MatchesLoopOracleAndIsIdempotent) {
  const auto k = oracle::random_complex({3, 32, 12}, 8);
  const auto m = make_cartesian_mask(32, 3.0, 0.1, 77);
  const auto out = undersample(k, m);
  for (std::size_t p = 0; p < 3; ++p)
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 12; ++x) {
        const std::size_t i = (p * 32 + y) * 12 + x;
        EXPECT_EQ(out[i], m.lines[y] ? k[i] : cd(0.0));
      }
  EXPECT_EQ(undersample(out, m), out);
  EXPECT_THROW(undersample(k, make_cartesian_mask(16, 2.0, 0.1, 0)), ShapeError);
}

TEST(DataConsistency, HardFullMaskReturnsMeasurements) {
  const auto pred = oracle::random_complex({8, 8}, 1), meas = oracle::random_complex({8, 8}, 2);
  EXPECT_EQ(data_consistency(pred, meas, make_cartesian_mask(8, 1.0, 0.0, 0), DcMode::hard()), meas);
}

TEST(DataConsistency, LambdaZeroKeepsPrediction) {
  const auto pred = oracle::random_complex({8, 8}, 1), meas = oracle::random_complex({8, 8}, 2);
  EXPECT_EQ(data_consistency(pred, meas, make_cartesian_mask(8, 2.0, 0.25, 0), DcMode::soft(0.0)), pred);
}

TEST(DataConsistency, LambdaOneAveragesSampledEntries) {
  ComplexTensor<double> pred({4, 4}), meas({4, 4});
  for (auto& v : pred.data()) v = 2.0;
  for (auto& v : meas.data()) v = 4.0;
  const auto m = make_cartesian_mask(4, 2.0, 0.5, 0);
  const auto out = data_consistency(pred, meas, m, DcMode::soft(1.0));
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(out[y * 4 + x], m[y] ? cd(3.0) : cd(2.0));
}

TEST(DataConsistency, HardModeIsIdempotentAndRejectsNegativeLambda) {
  const auto pred = oracle::random_complex({2, 16, 16}, 1), meas = oracle::random_complex({2, 16, 16}, 2);
  const auto m = make_cartesian_mask(16, 4.0, 0.125, 5);
  const auto once = data_consistency(pred, meas, m, DcMode::hard());
  EXPECT_EQ(data_consistency(once, meas, m, DcMode::hard()), once);
  EXPECT_THROW(DcMode::soft(-1.0), ParameterError);
}
