#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "diffpath/mixture.hpp"
#include "diffpath/random.hpp"
#include "diffpath/score.hpp"
#include "oracles.hpp"

namespace diffpath {
namespace {

using namespace oracle;

TrajectoryRecord random_record(Rng& rng, Dims dims, int steps) {
  TrajectoryRecord rec;
  rec.sample_id = "r";
  for (int i = 0; i < steps; ++i) {
    rec.timesteps.push_back(1 + 7 * i);
    rec.predicted.push_back(normal_tensor(dims, rng));
    rec.truth.push_back(normal_tensor(dims, rng));
  }
  return rec;
}

TEST(MseTrajectory, MatchesScalarLoop) {
  Rng rng(3);
  const auto rec = random_record(rng, {1, 2, 5, 4}, 6);
  const auto mse = mse_trajectory(rec);
  ASSERT_EQ(mse.maps.size(), 6u);
  for (std::size_t t = 0; t < 6; ++t) {
    for (std::size_t j = 0; j < rec.predicted[t].size(); ++j) {
      const double d = static_cast<double>(rec.predicted[t][j]) - rec.truth[t][j];
      EXPECT_NEAR(mse.maps[t][j], d * d, 1e-6 * std::max(1.0, d * d));
    }
  }
}

TEST(MseTrajectory, ExactAndConstantOffset) {
  Rng rng(4);
  auto rec = random_record(rng, {1, 1, 3, 3}, 3);
  rec.truth = rec.predicted;
  for (const auto& m : mse_trajectory(rec).maps)
    for (float v : m.values()) EXPECT_EQ(v, 0.0f);
  for (auto& t : rec.truth)
    for (float& v : t.values()) v -= 0.5f;
  for (const auto& m : mse_trajectory(rec).maps)
    for (float v : m.values()) EXPECT_NEAR(v, 0.25f, 1e-6);
}

TEST(Ssim, MatchesDirectWindowReference) {
  Rng rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const std::size_t C = 2, H = 13, W = 17;
    const Tensor a = minmax_rescale(normal_tensor({1, C, H, W}, rng));
    const Tensor b = minmax_rescale(normal_tensor({1, C, H, W}, rng));
    const auto map = ssim_map(a, b);
    const auto ref = reference_ssim(std::vector<double>(a.values().begin(), a.values().end()),
                                    std::vector<double>(b.values().begin(), b.values().end()), C, H, W);
    for (std::size_t j = 0; j < ref.size(); ++j) ASSERT_NEAR(map.values[j], ref[j], 1e-9) << j;
  }
}

TEST(Ssim, SelfSymmetryAndBounds) {
  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor a = minmax_rescale(normal_tensor({1, 1, 16, 16}, rng));
    const Tensor b = minmax_rescale(normal_tensor({1, 1, 16, 16}, rng));
    for (double v : ssim_map(a, a).values) ASSERT_NEAR(v, 1.0, 1e-6);
    const auto ab = ssim_map(a, b), ba = ssim_map(b, a);
    for (std::size_t j = 0; j < ab.values.size(); ++j) {
      ASSERT_NEAR(ab.values[j], ba.values[j], 1e-6);
      ASSERT_GE(ab.values[j], -1.0);
      ASSERT_LE(ab.values[j], 1.0);
    }
  }
}

TEST(Ssim, AnticorrelatedPairIsNegative) {
  Tensor a({1, 1, 16, 16}), b({1, 1, 16, 16});
  for (std::size_t y = 0; y < 16; ++y) {
    for (std::size_t x = 0; x < 16; ++x) {
      a[y * 16 + x] = ((x + y) % 2 == 0) ? 1.0f : 0.0f;
      b[y * 16 + x] = 1.0f - a[y * 16 + x];
    }
  }
  EXPECT_LT(ssim_map(a, b).mean(), 0.0);
}

TEST(Ssim, ConstantImagesClosedForm) {
  const double c1 = 1e-4;
  for (double va : {0.0, 0.2, 0.5}) {
    for (double vb : {0.1, 0.7, 1.0}) {
      const Tensor a({1, 1, 12, 12}, std::vector<float>(144, static_cast<float>(va)));
      const Tensor b({1, 1, 12, 12}, std::vector<float>(144, static_cast<float>(vb)));
      const double fa = static_cast<float>(va), fb = static_cast<float>(vb);
      const double expect = (2 * fa * fb + c1) / (fa * fa + fb * fb + c1);
      for (double v : ssim_map(a, b).values) EXPECT_NEAR(v, expect, 1e-12);
    }
  }
}

TEST(Ssim, Errors) {
  const Tensor small({1, 1, 8, 8});
  EXPECT_THROW(ssim_map(small, small), InvalidArgument);
  EXPECT_THROW(ssim_map(Tensor({1, 1, 12, 12}), Tensor({1, 1, 12, 13})), InvalidArgument);
  SsimOptions even;
  even.window = 4;
  EXPECT_THROW(ssim_map(small, small, even), InvalidArgument);
}

TEST(ComputeScore, PerfectPredictorIsZero) {
  Rng rng(5);
  auto rec = random_record(rng, {1, 1, 12, 12}, 4);
  rec.truth = rec.predicted;
  const Tensor x0 = normal_tensor({1, 1, 12, 12}, rng);
  for (double v : compute_score(x0, rec)) EXPECT_EQ(v, 0.0);
}

TEST(ComputeScore, SinglePixelExpansion) {
  const double a = 0.3, b = 1.7;
  TrajectoryRecord rec;
  rec.timesteps = {1, 2};
  rec.predicted = {Tensor({1, 1, 1, 1}, {static_cast<float>(a)}), Tensor({1, 1, 1, 1}, {static_cast<float>(b)})};
  rec.truth = {Tensor({1, 1, 1, 1}), Tensor({1, 1, 1, 1})};
  ScoreOptions opt;
  opt.use_ssim = false;
  opt.use_error = false;
  const double fa = static_cast<float>(a), fb = static_cast<float>(b);
  const Score6D s = compute_score(Tensor({1, 1, 1, 1}), rec, opt);
  EXPECT_DOUBLE_EQ(s[0], fa + fb);
  EXPECT_DOUBLE_EQ(s[3], fb - fa);
  EXPECT_DOUBLE_EQ(s[1], fa * fa + fb * fb);
  EXPECT_DOUBLE_EQ(s[4], fb * fb - fa * fa);
  EXPECT_DOUBLE_EQ(s[2], fa * fa * fa + fb * fb * fb);
  EXPECT_DOUBLE_EQ(s[5], fb * fb * fb - fa * fa * fa);
}

TEST(ComputeScore, MatchesScalarReferenceForAllFlagCombinations) {
  Rng rng(21);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t C = 1 + trial % 2, H = 12, W = 14;
    const auto rec = random_record(rng, {1, C, H, W}, 3 + trial % 5);
    const Tensor x0 = normal_tensor({1, C, H, W}, rng);
    for (bool use_error : {false, true}) {
      for (bool use_ssim : {false, true}) {
        ScoreOptions opt;
        opt.use_error = use_error;
        opt.use_ssim = use_ssim;
        const Score6D got = compute_score(x0, rec, opt);
        const RefScore ref = reference_score(x0, rec, use_error, use_ssim, C, H, W);
        for (int k = 0; k < 6; ++k) {
          const double want = static_cast<double>(ref.s[k]);
          const double tol = 1e-5 * std::max(std::abs(want), 1e-3 * static_cast<double>(ref.scale[k]));
          EXPECT_NEAR(got[k], want, tol) << "k=" << k << " error=" << use_error << " ssim=" << use_ssim;
        }
      }
    }
  }
}

TEST(ComputeScore, ZeroSsimWeightMatchesUnweighted) {
  Rng rng(6);
  const auto rec = random_record(rng, {1, 1, 3, 3}, 4);
  const auto maps = mse_trajectory(rec).maps;
  const std::vector<double> ones(9, 1.0 - 0.0);
  ScoreOptions plain;
  plain.use_ssim = false;
  const Score6D a = pool_score(maps, ones);
  const Score6D b = compute_score(Tensor({1, 1, 3, 3}), rec, plain);
  for (int k = 0; k < 6; ++k) EXPECT_EQ(a[k], b[k]);
}

TEST(ComputeScore, PowerScaling) {
  Rng rng(7);
  const auto rec = random_record(rng, {1, 1, 4, 4}, 5);
  auto maps = mse_trajectory(rec).maps;
  std::vector<double> w(16);
  std::uniform_real_distribution<double> u(0.0, 2.0);
  for (double& v : w) v = u(rng);
  const Score6D base = pool_score(maps, w);
  const float lambda = 2.0f;
  for (auto& m : maps)
    for (float& v : m.values()) v *= lambda;
  const Score6D scaled = pool_score(maps, w);
  EXPECT_DOUBLE_EQ(scaled[0], base[0] * 2);
  EXPECT_DOUBLE_EQ(scaled[1], base[1] * 4);
  EXPECT_DOUBLE_EQ(scaled[2], base[2] * 8);
}

TEST(ComputeScore, InsufficientTrajectory) {
  Rng rng(8);
  const auto rec = random_record(rng, {1, 1, 12, 12}, 1);
  EXPECT_THROW(compute_score(Tensor({1, 1, 12, 12}), rec), InsufficientTrajectory);
  EXPECT_THROW(compute_score(Tensor({1, 1, 12, 11}), random_record(rng, {1, 1, 12, 12}, 3)), InvalidArgument);
}

TEST(ComputeScore, ShiftedDataRaisesSecondMoment) {
  const auto schedule = make_linear_schedule();
  const auto model = make_random_mixture(3, ImageShape{1, 1, 16, 16}, 0.3, 0.1, 99);
  const AnalyticPredictor predictor(model, schedule);
  Rng rng(100);
  const ImageTensor id = sample_images(model, 200, rng);
  const ImageTensor ood = sample_images(model.shifted(4.0), 200, rng);
  auto s2 = [&](const ImageTensor& batch) {
    std::vector<double> out;
    for (std::size_t i = 0; i < batch.shape().n; ++i) {
      const Tensor x = batch.sample(i);
      out.push_back(compute_score(x, ddim_invert(x, predictor, schedule, {}))[1]);
    }
    return out;
  };
  const auto a = s2(id), b = s2(ood);
  double u = 0.0;
  for (double x : a)
    for (double y : b) u += (y > x) + 0.5 * (y == x);
  const double n1 = static_cast<double>(a.size()), n2 = static_cast<double>(b.size());
  const double z = (u - n1 * n2 / 2) / std::sqrt(n1 * n2 * (n1 + n2 + 1) / 12);
  EXPECT_GT(z, 2.3263) << "one-sided Mann-Whitney p >= 0.01";
}

TEST(ScoreTable, RoundTripIsBitExact) {
  Rng rng(9);
  std::vector<ScoreRow> rows;
  std::normal_distribution<double> n(0.0, 1e3);
  for (int i = 0; i < 10; ++i) {
    ScoreRow r{"ds/val/part-0000/" + std::to_string(i), {}};
    for (double& v : r.score) v = n(rng);
    rows.push_back(r);
  }
  const auto path = std::filesystem::temp_directory_path() / "diffpath_score_table.tsv";
  write_score_table(path, rows);
  const auto back = read_score_table(path);
  ASSERT_EQ(back.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(back[i].sample_id, rows[i].sample_id);
    for (int k = 0; k < 6; ++k) EXPECT_EQ(back[i].score[k], rows[i].score[k]);
  }
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace diffpath
