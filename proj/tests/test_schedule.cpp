#include <gtest/gtest.h>

#include <cmath>

#include "diffpath/random.hpp"
#include "diffpath/schedule.hpp"

namespace diffpath {
namespace {

TEST(Schedule, SingleStep) {
  const auto s = make_linear_schedule(1, 0.1, 0.1);
  EXPECT_EQ(s.steps(), 1);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.9);
  EXPECT_DOUBLE_EQ(s.sigma(1), std::sqrt(0.1));
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, ProductOfHalves) {
  const DiffusionSchedule s({0.5, 0.5}, SigmaConvention::kVariancePreserving);
  EXPECT_DOUBLE_EQ(s.alpha_bar(1), 0.5);
  EXPECT_DOUBLE_EQ(s.alpha_bar(2), 0.25);
}

TEST(Schedule, DefaultTerminalAlphaBarMatchesDirectProduct) {
  const auto s = make_linear_schedule();
  long double prod = 1.0L;
  for (int i = 0; i < 1000; ++i) prod *= 1.0L - (1e-4L + (0.02L - 1e-4L) * i / 999.0L);
  EXPECT_NEAR(s.alpha_bar(1000), static_cast<double>(prod), 1e-15);
  EXPECT_NEAR(s.alpha_bar(1000), 4.04e-5, 0.01e-5);
  EXPECT_DOUBLE_EQ(s.beta(1), 1e-4);
  EXPECT_DOUBLE_EQ(s.beta(1000), 0.02);
}

TEST(Schedule, InvariantsAtDefaultLength) {
  const auto s = make_linear_schedule();
  for (int t = 1; t <= s.steps(); ++t) {
    EXPECT_GT(s.beta(t), 0.0);
    EXPECT_LT(s.beta(t), 1.0);
    EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_GT(s.sigma(t), s.sigma(t - 1));
    EXPECT_NEAR(s.alpha_bar(t) + s.sigma(t) * s.sigma(t), 1.0, 1e-12);
  }
}

TEST(Schedule, RejectsBadParameters) {
  EXPECT_THROW(make_linear_schedule(0), InvalidArgument);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.02), InvalidArgument);
  EXPECT_THROW(make_linear_schedule(10, 0.03, 0.02), InvalidArgument);
  EXPECT_THROW(make_linear_schedule(10, 1e-4, 1.0), InvalidArgument);
  EXPECT_THROW(DiffusionSchedule({0.1, 1.0}, SigmaConvention::kVariancePreserving), InvalidArgument);
  const auto s = make_linear_schedule(10);
  EXPECT_THROW(s.beta(0), InvalidArgument);
  EXPECT_THROW(s.alpha_bar(11), InvalidArgument);
}

TEST(Schedule, PosteriorRatioConvention) {
  const auto s = make_linear_schedule(50, 1e-3, 0.05, SigmaConvention::kPosteriorRatio);
  EXPECT_EQ(s.sigma(1), 0.0);
  for (int t = 2; t <= 50; ++t) {
    EXPECT_NEAR(s.sigma(t) * s.sigma(t), (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)), 1e-14);
  }
  EXPECT_EQ(parse_sigma_convention("ratio"), SigmaConvention::kPosteriorRatio);
  EXPECT_EQ(parse_sigma_convention(to_string(SigmaConvention::kVariancePreserving)),
            SigmaConvention::kVariancePreserving);
  EXPECT_THROW(parse_sigma_convention("cosine"), InvalidArgument);
}

TEST(ForwardNoise, ZeroLimits) {
  const auto s = make_linear_schedule();
  Rng rng(1);
  const Tensor x0 = normal_tensor({1, 2, 4, 4}, rng);
  const Tensor eps = normal_tensor({1, 2, 4, 4}, rng);
  const Tensor zero({1, 2, 4, 4});
  for (int t : {1, 250, 1000}) {
    const Tensor a = forward_noise(s, x0, t, zero);
    const Tensor b = forward_noise(s, zero, t, eps);
    for (std::size_t i = 0; i < x0.size(); ++i) {
      EXPECT_FLOAT_EQ(a[i], static_cast<float>(std::sqrt(s.alpha_bar(t)) * x0[i]));
      EXPECT_FLOAT_EQ(b[i], static_cast<float>(s.sigma(t) * eps[i]));
    }
    const Tensor e = true_noise(s, x0, a, t);
    for (float v : e.values()) EXPECT_NEAR(v, 0.0f, 1e-5);
  }
}

TEST(ForwardNoise, MonteCarloMoments) {
  const auto s = make_linear_schedule();
  constexpr std::size_t kDraws = 100000;
  const Tensor x0({1, 1, 1, 1}, {0.7f});
  Rng rng(2024);
  for (int t : {10, 500, 900}) {
    double sum = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < kDraws; ++i) {
      const double v = forward_noise(s, x0, t, normal_tensor({1, 1, 1, 1}, rng))[0];
      sum += v;
      sq += v * v;
    }
    const double mean = sum / kDraws;
    const double var = sq / kDraws - mean * mean;
    const double sd = s.sigma(t);
    EXPECT_NEAR(mean, std::sqrt(s.alpha_bar(t)) * 0.7, 3.0 * sd / std::sqrt(static_cast<double>(kDraws)));
    EXPECT_NEAR(var / (sd * sd), 1.0, 0.05);
  }
}

TEST(TrueNoise, MatchesScalarReference) {
  const auto s = make_linear_schedule(200, 2e-4, 0.03);
  Rng rng(5);
  for (int t : {1, 17, 200}) {
    const Tensor x0 = normal_tensor({2, 1, 3, 3}, rng);
    const Tensor xt = normal_tensor({2, 1, 3, 3}, rng);
    const Tensor eps = true_noise(s, x0, xt, t);
    long double ab = 1.0L;
    for (int k = 1; k <= t; ++k) ab *= 1.0L - (2e-4L + (0.03L - 2e-4L) * (k - 1) / 199.0L);
    for (std::size_t i = 0; i < eps.size(); ++i) {
      const long double ref = (xt[i] - std::sqrt(ab) * x0[i]) / std::sqrt(1.0L - ab);
      EXPECT_NEAR(eps[i], static_cast<double>(ref), 1e-5 * std::max(1.0, std::abs(static_cast<double>(ref))));
    }
  }
}

TEST(TrueNoise, RoundTripRecoversNoise) {
  const auto s = make_linear_schedule();
  Rng rng(9);
  std::uniform_int_distribution<int> pick(1, s.steps());
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x0 = normal_tensor({1, 1, 4, 4}, rng);
    const Tensor eps = normal_tensor({1, 1, 4, 4}, rng);
    const int t = pick(rng);
    const Tensor back = true_noise(s, x0, forward_noise(s, x0, t, eps), t);
    for (std::size_t i = 0; i < eps.size(); ++i) ASSERT_NEAR(back[i], eps[i], 1e-5) << "t=" << t;
  }
}

TEST(TrueNoise, Errors) {
  const auto vp = make_linear_schedule(10);
  const auto ratio = make_linear_schedule(10, 1e-4, 0.02, SigmaConvention::kPosteriorRatio);
  const Tensor a({1, 1, 2, 2}), b({1, 1, 2, 3});
  EXPECT_THROW(true_noise(vp, a, b, 1), InvalidArgument);
  EXPECT_THROW(forward_noise(vp, a, 1, b), InvalidArgument);
  EXPECT_THROW(true_noise(ratio, a, a, 1), DegenerateTimestep);
  EXPECT_NO_THROW(true_noise(ratio, a, a, 2));
}

}  // namespace
}  // namespace diffpath
