#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/predictor.hpp"
#include "diffpath/random.hpp"
#include "diffpath/schedule.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"

namespace diffpath {

enum class TrajectoryMode {
  kDdimInversion,
  kStochasticForward,
};

inline std::string_view to_string(TrajectoryMode m) {
  return m == TrajectoryMode::kDdimInversion ? "ddim-inversion" : "stochastic-forward";
}

inline TrajectoryMode parse_trajectory_mode(std::string_view s) {
  if (s == "ddim-inversion" || s == "ddim") return TrajectoryMode::kDdimInversion;
  if (s == "stochastic-forward" || s == "stochastic") return TrajectoryMode::kStochasticForward;
  throw InvalidArgument("unknown trajectory mode '" + std::string(s) + "'");
}

inline constexpr int kDefaultTrajectorySteps = 10;

struct TrajectoryConfig {
  TrajectoryMode mode = TrajectoryMode::kDdimInversion;
  int steps = kDefaultTrajectorySteps;  // number of evaluated timesteps T'
  std::uint64_t seed = 0;               // stochastic-forward only
  bool keep_latents = false;

  void validate(int T) const {
    if (steps < 1 || steps > T) {
      throw InvalidArgument("T_prime = " + std::to_string(steps) + " violates 1 <= T_prime <= T = " +
                            std::to_string(T));
    }
  }
};

/// T' timesteps spread with uniform stride over [1, T] (rounded to nearest).
/// A single step selects t = 1.
inline std::vector<int> select_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) {
    throw InvalidArgument("T_prime = " + std::to_string(steps) + " violates 1 <= T_prime <= T = " +
                          std::to_string(T));
  }
  std::vector<int> ts(static_cast<std::size_t>(steps));
  if (steps == 1) {
    ts[0] = 1;
    return ts;
  }
  const std::int64_t span = T - 1;
  const std::int64_t div = steps - 1;
  for (std::int64_t i = 0; i < steps; ++i) {
    ts[static_cast<std::size_t>(i)] = static_cast<int>(1 + (i * span + div / 2) / div);
  }
  return ts;
}

/// Paired predicted and true noise maps along one sample's trajectory.
struct TrajectoryRecord {
  std::string sample_id;
  std::vector<int> timesteps;
  std::vector<Tensor> predicted;
  std::vector<Tensor> truth;
  /// x_0 followed by x_{t_i} at every visited step, when requested.
  std::vector<Tensor> latents;

  std::size_t length() const noexcept { return timesteps.size(); }

  /// Throws when the record breaks its invariants.
  void validate() const {
    const std::size_t n = timesteps.size();
    if (n == 0) throw InvalidArgument("trajectory '" + sample_id + "' is empty");
    if (predicted.size() != n || truth.size() != n) {
      throw InvalidArgument("trajectory '" + sample_id + "' has mismatched predicted/truth lengths");
    }
    for (std::size_t i = 1; i < n; ++i) {
      if (timesteps[i] <= timesteps[i - 1]) {
        throw InvalidArgument("trajectory '" + sample_id + "' timesteps are not strictly increasing");
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!predicted[i].same_dims(predicted[0]) || !truth[i].same_dims(predicted[0])) {
        throw InvalidArgument("trajectory '" + sample_id + "' tensors disagree in shape");
      }
    }
    if (!latents.empty() && latents.size() != n + 1) {
      throw InvalidArgument("trajectory '" + sample_id + "' must hold T'+1 latents when latents are kept");
    }
  }
};

/// One deterministic DDIM step from timestep `from` to `to` given a noise
/// estimate. `from` may be 0 (clean data).
inline Tensor ddim_step(const DiffusionSchedule& schedule, const Tensor& x, const Tensor& eps_hat, int from, int to) {
  const double a_from = schedule.sqrt_alpha_bar(from);
  const double s_from = schedule.sigma(from);
  const double a_to = schedule.sqrt_alpha_bar(to);
  const double s_to = schedule.sigma(to);
  Tensor next(x.dims());
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double x0_hat = (static_cast<double>(x[j]) - s_from * eps_hat[j]) / a_from;
    next[j] = static_cast<float>(a_to * x0_hat + s_to * eps_hat[j]);
  }
  return next;
}

/// DDIM inversion: integrates the deterministic update forward in time from
/// x_{t_0} = x_0 through the selected timesteps. truth[i] is the noise that
/// explains x_{t_i} relative to x_0; it is the zero tensor at the first step.
inline TrajectoryRecord ddim_invert(const Tensor& x0, const NoisePredictor& predictor,
                                    const DiffusionSchedule& schedule, const TrajectoryConfig& config,
                                    std::string sample_id = {}) {
  config.validate(schedule.steps());
  TrajectoryRecord rec;
  rec.sample_id = std::move(sample_id);
  rec.timesteps = select_timesteps(schedule.steps(), config.steps);
  if (config.keep_latents) rec.latents.push_back(x0);

  Tensor x = x0;
  for (std::size_t i = 0; i < rec.timesteps.size(); ++i) {
    const int t = rec.timesteps[i];
    Tensor eps_hat = checked_predict(predictor, x, t, rec.sample_id);
    rec.truth.push_back(i == 0 ? Tensor(x0.dims()) : true_noise(schedule, x0, x, t));
    if (config.keep_latents) rec.latents.push_back(x);
    if (i + 1 < rec.timesteps.size()) x = ddim_step(schedule, x, eps_hat, t, rec.timesteps[i + 1]);
    rec.predicted.push_back(std::move(eps_hat));
  }
  return rec;
}

/// Independent forward-process draws at each selected timestep, seeded from
/// config.seed and the sample id.
inline TrajectoryRecord stochastic_forward(const Tensor& x0, const NoisePredictor& predictor,
                                           const DiffusionSchedule& schedule, const TrajectoryConfig& config,
                                           std::string sample_id = {}) {
  config.validate(schedule.steps());
  TrajectoryRecord rec;
  rec.sample_id = std::move(sample_id);
  rec.timesteps = select_timesteps(schedule.steps(), config.steps);
  if (config.keep_latents) rec.latents.push_back(x0);

  Rng rng(derive_seed(config.seed, rec.sample_id));
  for (int t : rec.timesteps) {
    Tensor eps = normal_tensor(x0.dims(), rng);
    Tensor xt = forward_noise(schedule, x0, t, eps);
    rec.predicted.push_back(checked_predict(predictor, xt, t, rec.sample_id));
    rec.truth.push_back(std::move(eps));
    if (config.keep_latents) rec.latents.push_back(std::move(xt));
  }
  return rec;
}

inline TrajectoryRecord extract_trajectory(const Tensor& x0, const NoisePredictor& predictor,
                                           const DiffusionSchedule& schedule, const TrajectoryConfig& config,
                                           std::string sample_id = {}) {
  return config.mode == TrajectoryMode::kDdimInversion
             ? ddim_invert(x0, predictor, schedule, config, std::move(sample_id))
             : stochastic_forward(x0, predictor, schedule, config, std::move(sample_id));
}

/// Packs predicted and truth maps into one (2, T', C, H, W) tensor:
/// index 0 along the first axis is predicted, 1 is truth.
inline Tensor pack_trajectory(const TrajectoryRecord& rec) {
  rec.validate();
  const std::size_t n = rec.length();
  const std::size_t D = rec.predicted[0].size();
  Dims dims{2, n};
  const auto& inner = rec.predicted[0].dims();
  // Drop a leading batch axis of 1 so the file holds (2, T', C, H, W).
  const std::size_t skip = inner.size() == 4 && inner[0] == 1 ? 1 : 0;
  dims.insert(dims.end(), inner.begin() + static_cast<std::ptrdiff_t>(skip), inner.end());
  Tensor out(dims);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(rec.predicted[i].values().begin(), rec.predicted[i].values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(i * D));
    std::copy(rec.truth[i].values().begin(), rec.truth[i].values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>((n + i) * D));
  }
  return out;
}

inline TrajectoryRecord unpack_trajectory(const Tensor& packed, std::string sample_id, std::vector<int> timesteps) {
  if (packed.rank() < 3 || packed.dims()[0] != 2 || packed.dims()[1] != timesteps.size()) {
    throw InvalidArgument("packed trajectory dims " + dims_to_string(packed.dims()) + " do not match " +
                          std::to_string(timesteps.size()) + " timesteps");
  }
  const std::size_t n = timesteps.size();
  Dims inner(packed.dims().begin() + 2, packed.dims().end());
  if (inner.size() == 3) inner.insert(inner.begin(), 1);
  const std::size_t D = element_count(inner);
  TrajectoryRecord rec;
  rec.sample_id = std::move(sample_id);
  rec.timesteps = std::move(timesteps);
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = packed.values().subspan(i * D, D);
    const auto q = packed.values().subspan((n + i) * D, D);
    rec.predicted.emplace_back(inner, std::vector<float>(p.begin(), p.end()));
    rec.truth.emplace_back(inner, std::vector<float>(q.begin(), q.end()));
  }
  rec.validate();
  return rec;
}

}  // namespace diffpath
