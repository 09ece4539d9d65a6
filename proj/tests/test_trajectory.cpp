#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Dense>

#include "diffpath/mixture.hpp"
#include "diffpath/random.hpp"
#include "diffpath/schedule.hpp"
#include "diffpath/trajectory.hpp"
#include "oracles.hpp"

namespace diffpath {
namespace {

using namespace oracle;

double mse(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (static_cast<double>(a[i]) - b[i]) * (static_cast<double>(a[i]) - b[i]);
  return s / static_cast<double>(a.size());
}

GaussianMixtureDataModel standard_normal(ImageShape s) {
  s.n = 1;
  return {s, {1.0}, {Tensor(s.dims())}, {1.0}};
}

// Predictor that rescales and shifts another predictor's output.
class Perturbed final : public NoisePredictor {
 public:
  Perturbed(const NoisePredictor& base, double scale, double shift) : base_(base), scale_(scale), shift_(shift) {}
  Tensor predict(const Tensor& xt, int t, std::string_view id) const override {
    Tensor out = base_.predict(xt, t, id);
    for (float& v : out.values()) v = static_cast<float>(scale_ * v + shift_);
    return out;
  }
  std::string name() const override { return "perturbed"; }

 private:
  const NoisePredictor& base_;
  double scale_, shift_;
};

TEST(SelectTimesteps, UniformStrideOverRange) {
  EXPECT_EQ(select_timesteps(1000, 1), std::vector<int>{1});
  EXPECT_EQ(select_timesteps(1000, 2), (std::vector<int>{1, 1000}));
  EXPECT_EQ(select_timesteps(10, 10), (std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10}));
  EXPECT_EQ(select_timesteps(100, 4), (std::vector<int>{1, 34, 67, 100}));
  const auto ts = select_timesteps(1000, 10);
  ASSERT_EQ(ts.size(), 10u);
  EXPECT_EQ(ts.front(), 1);
  EXPECT_EQ(ts.back(), 1000);
  for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_NEAR(ts[i] - ts[i - 1], 111.0, 1.0);
  EXPECT_THROW(select_timesteps(10, 0), InvalidArgument);
  EXPECT_THROW(select_timesteps(10, 11), InvalidArgument);
}

TEST(DdimStep, MatchesScalarUpdate) {
  const auto s = make_linear_schedule();
  Rng rng(1);
  const Tensor x = normal_tensor({1, 1, 3, 3}, rng);
  const Tensor e = normal_tensor({1, 1, 3, 3}, rng);
  const Tensor y = ddim_step(s, x, e, 100, 350);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = (x[i] - s.sigma(100) * e[i]) / std::sqrt(s.alpha_bar(100));
    EXPECT_NEAR(y[i], std::sqrt(s.alpha_bar(350)) * x0 + s.sigma(350) * e[i], 1e-6);
  }
}

TEST(DdimInvert, SingleStepTrajectory) {
  const auto s = make_linear_schedule();
  Rng rng(2);
  const Tensor x0 = normal_tensor({1, 1, 4, 4}, rng);
  const AnalyticPredictor oracle(standard_normal({1, 1, 4, 4}), s);
  TrajectoryConfig cfg;
  cfg.steps = 1;
  const auto rec = ddim_invert(x0, oracle, s, cfg, "one");
  ASSERT_EQ(rec.length(), 1u);
  EXPECT_EQ(rec.timesteps[0], 1);
  EXPECT_EQ(rec.truth[0], Tensor(x0.dims()));
  EXPECT_EQ(rec.predicted[0], oracle.predict(x0, 1, ""));
}

TEST(DdimInvert, TruthIsGroundTruthNoiseOfEachLatent) {
  const auto s = make_linear_schedule();
  const auto m = make_random_mixture(2, {1, 1, 4, 4}, 0.5, 0.2, 3);
  const AnalyticPredictor oracle(m, s);
  Rng rng(3);
  const Tensor x0 = m.sample(1, rng);
  TrajectoryConfig cfg;
  cfg.keep_latents = true;
  const auto rec = ddim_invert(x0, oracle, s, cfg, "a");
  rec.validate();
  ASSERT_EQ(rec.latents.size(), rec.length() + 1);
  EXPECT_EQ(rec.latents[0], x0);
  for (std::size_t i = 1; i < rec.length(); ++i) {
    EXPECT_EQ(rec.truth[i], true_noise(s, x0, rec.latents[i + 1], rec.timesteps[i]));
    EXPECT_EQ(rec.latents[i + 1], ddim_step(s, rec.latents[i], rec.predicted[i - 1], rec.timesteps[i - 1], rec.timesteps[i]));
  }
}

// Inverting every DDIM step walks the final latent back to x_0.
TEST(DdimInvert, ReverseIntegrationRecoversInput) {
  const auto s = make_linear_schedule();
  for (std::size_t K : {1u, 2u}) {
    const auto m = K == 1 ? standard_normal({1, 1, 4, 4}) : make_random_mixture(K, {1, 1, 4, 4}, 0.5, 0.3, 4);
    const AnalyticPredictor oracle(m, s);
    Rng rng(40 + K);
    const Tensor x0 = m.sample(1, rng);
    TrajectoryConfig cfg;
    cfg.keep_latents = true;
    const auto rec = ddim_invert(x0, oracle, s, cfg, "r");
    const auto& ts = rec.timesteps;
    Tensor x = rec.latents.back();
    for (std::size_t i = ts.size() - 1; i > 0; --i) {
      const double a_to = std::sqrt(s.alpha_bar(ts[i])), a_from = std::sqrt(s.alpha_bar(ts[i - 1]));
      const double c1 = a_to / a_from;
      const double c2 = s.sigma(ts[i]) - a_to * s.sigma(ts[i - 1]) / a_from;
      x = invert_step(oracle, x, ts[i - 1], c1, c2);
    }
    for (std::size_t j = 0; j < x0.size(); ++j) EXPECT_NEAR(x[j], x0[j], 1e-3) << "K=" << K;
  }
}

TEST(DdimInvert, BitReproducible) {
  const auto s = make_linear_schedule();
  const auto m = make_random_mixture(3, {1, 2, 4, 4}, 0.5, 0.2, 5);
  const AnalyticPredictor oracle(m, s);
  Rng rng(5);
  const Tensor x0 = m.sample(1, rng);
  TrajectoryConfig cfg;
  const auto a = ddim_invert(x0, oracle, s, cfg, "d");
  const auto b = ddim_invert(x0, oracle, s, cfg, "d");
  for (std::size_t i = 0; i < a.length(); ++i) {
    EXPECT_EQ(a.predicted[i], b.predicted[i]);
    EXPECT_EQ(a.truth[i], b.truth[i]);
  }
}

TEST(StochasticForward, SeededAndIndependentOfCallOrder) {
  const auto s = make_linear_schedule();
  const ZeroPredictor zero;
  TrajectoryConfig cfg;
  cfg.mode = TrajectoryMode::kStochasticForward;
  cfg.seed = 77;
  Rng rng(6);
  const Tensor x0 = normal_tensor({1, 1, 4, 4}, rng);
  const auto a = stochastic_forward(x0, zero, s, cfg, "s1");
  stochastic_forward(x0, zero, s, cfg, "s2");
  const auto b = extract_trajectory(x0, zero, s, cfg, "s1");
  for (std::size_t i = 0; i < a.length(); ++i) EXPECT_EQ(a.truth[i], b.truth[i]);
  const auto c = stochastic_forward(x0, zero, s, cfg, "s2");
  EXPECT_NE(a.truth[0], c.truth[0]);
}

TEST(StochasticForward, ZeroPredictorErrorIsNoiseSecondMoment) {
  const auto s = make_linear_schedule();
  const ZeroPredictor zero;
  TrajectoryConfig cfg;
  cfg.mode = TrajectoryMode::kStochasticForward;
  cfg.seed = 1;
  const Tensor x0({1, 3, 8, 8});
  std::vector<double> per_step(cfg.steps, 0.0);
  constexpr int kSamples = 200;
  for (int n = 0; n < kSamples; ++n) {
    const auto rec = stochastic_forward(x0, zero, s, cfg, std::to_string(n));
    for (std::size_t i = 0; i < rec.length(); ++i) per_step[i] += mse(rec.predicted[i], rec.truth[i]) * x0.size();
  }
  // E||eps||^2 = C*H*W = 192; the sum over 200*192 unit chi-square terms has
  // relative standard deviation sqrt(2/38400) ~ 0.0072.
  for (double v : per_step) EXPECT_NEAR(v / kSamples / 192.0, 1.0, 0.03);
}

TEST(StochasticForward, ShiftedDataHasLargerErrorAtEveryStep) {
  const auto s = make_linear_schedule();
  const auto m = make_random_mixture(2, {1, 1, 8, 8}, 0.3, 0.1, 7);
  const auto shifted = m.shifted(4.0);
  const AnalyticPredictor oracle(m, s);
  TrajectoryConfig cfg;
  cfg.mode = TrajectoryMode::kStochasticForward;
  cfg.seed = 3;
  Rng rng(8);
  std::vector<double> id(cfg.steps, 0.0), ood(cfg.steps, 0.0);
  for (int n = 0; n < 100; ++n) {
    const auto a = stochastic_forward(m.sample(1, rng), oracle, s, cfg, "i" + std::to_string(n));
    const auto b = stochastic_forward(shifted.sample(1, rng), oracle, s, cfg, "o" + std::to_string(n));
    for (std::size_t i = 0; i < a.length(); ++i) {
      id[i] += mse(a.predicted[i], a.truth[i]);
      ood[i] += mse(b.predicted[i], b.truth[i]);
    }
  }
  for (std::size_t i = 0; i < id.size(); ++i) EXPECT_GT(ood[i], id[i]) << "step " << i;
}

// Over 100 in-distribution samples the exact predictor gives a mean per-step
// error no larger than rescaled or biased versions of itself when the target
// is the sampled forward noise.
TEST(StochasticForward, ExactPredictorBeatsPerturbedOnes) {
  const auto s = make_linear_schedule();
  const auto m = make_random_mixture(2, {1, 1, 4, 4}, 0.5, 0.2, 9);
  const AnalyticPredictor oracle(m, s);
  const Perturbed scaled_up(oracle, 1.1, 0.0), scaled_down(oracle, 0.9, 0.0), biased(oracle, 1.0, 0.05);
  TrajectoryConfig cfg;
  cfg.mode = TrajectoryMode::kStochasticForward;
  cfg.seed = 12;
  Rng rng(10);
  const Tensor data = m.sample(100, rng);
  const auto mean_error = [&](const NoisePredictor& p) {
    double total = 0.0;
    for (std::size_t n = 0; n < 100; ++n) {
      const Tensor x0(Dims{1, 1, 4, 4}, std::vector<float>(data.values().begin() + n * 16, data.values().begin() + (n + 1) * 16));
      const auto rec = stochastic_forward(x0, p, s, cfg, std::to_string(n));
      for (std::size_t i = 0; i < rec.length(); ++i) total += mse(rec.predicted[i], rec.truth[i]);
    }
    return total;
  };
  const double exact = mean_error(oracle);
  EXPECT_LE(exact, mean_error(scaled_up));
  EXPECT_LE(exact, mean_error(scaled_down));
  EXPECT_LE(exact, mean_error(biased));
}

TEST(TrajectoryRecord, InvariantsHoldOverRandomConfigs) {
  Rng rng(11);
  std::uniform_int_distribution<int> pick_T(1, 200);
  for (int trial = 0; trial < 30; ++trial) {
    const int T = pick_T(rng);
    const auto s = make_linear_schedule(T, 1e-3, 0.05);
    TrajectoryConfig cfg;
    cfg.steps = std::uniform_int_distribution<int>(1, std::min(T, 12))(rng);
    cfg.mode = trial % 2 == 0 ? TrajectoryMode::kDdimInversion : TrajectoryMode::kStochasticForward;
    cfg.keep_latents = trial % 3 == 0;
    const Tensor x0 = normal_tensor({1, 2, 3, 5}, rng);
    const auto rec = extract_trajectory(x0, ZeroPredictor{}, s, cfg, "p");
    EXPECT_NO_THROW(rec.validate());
    EXPECT_EQ(rec.length(), static_cast<std::size_t>(cfg.steps));
    for (const auto& t : rec.predicted) EXPECT_EQ(t.dims(), x0.dims());
    const auto back = unpack_trajectory(pack_trajectory(rec), rec.sample_id, rec.timesteps);
    for (std::size_t i = 0; i < rec.length(); ++i) {
      EXPECT_EQ(back.predicted[i].values().size(), rec.predicted[i].size());
      EXPECT_TRUE(std::equal(back.truth[i].values().begin(), back.truth[i].values().end(), rec.truth[i].values().begin()));
    }
  }
}

TEST(TrajectoryConfig, RejectsOutOfRangeStepCount) {
  const auto s = make_linear_schedule(50);
  TrajectoryConfig cfg;
  cfg.steps = 51;
  EXPECT_THROW(ddim_invert(Tensor({1, 1, 2, 2}), ZeroPredictor{}, s, cfg), InvalidArgument);
  cfg.steps = 0;
  try {
    cfg.validate(50);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("1 <= T_prime <= T"), std::string::npos);
  }
  EXPECT_EQ(parse_trajectory_mode(to_string(TrajectoryMode::kStochasticForward)), TrajectoryMode::kStochasticForward);
}

}  // namespace
}  // namespace diffpath
