#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/tensor.hpp"

namespace diffpath {

/// How the forward mixing scale sigma_t is derived from the schedule.
enum class SigmaConvention {
  /// sigma_t = sqrt(1 - alpha_bar_t); the variance-preserving forward scale.
  kVariancePreserving,
  /// sigma_t^2 = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); kept for sensitivity runs.
  kPosteriorRatio,
};

inline std::string_view to_string(SigmaConvention c) {
  return c == SigmaConvention::kVariancePreserving ? "variance-preserving" : "posterior-ratio";
}

inline SigmaConvention parse_sigma_convention(std::string_view s) {
  if (s == "variance-preserving" || s == "vp") return SigmaConvention::kVariancePreserving;
  if (s == "posterior-ratio" || s == "ratio") return SigmaConvention::kPosteriorRatio;
  throw InvalidArgument("unknown sigma convention '" + std::string(s) + "'");
}

/// Discrete variance schedule over timesteps t = 1..T. Index 0 holds the
/// clean-data convention alpha_bar_0 = 1, sigma_0 = 0.
class DiffusionSchedule {
 public:
  DiffusionSchedule(std::vector<double> betas, SigmaConvention convention)
      : convention_(convention) {
    if (betas.empty()) throw InvalidArgument("schedule needs at least one timestep");
    const std::size_t T = betas.size();
    beta_.assign(T + 1, 0.0);
    alpha_bar_.assign(T + 1, 1.0);
    sigma_.assign(T + 1, 0.0);
    for (std::size_t t = 1; t <= T; ++t) {
      const double b = betas[t - 1];
      if (!(b > 0.0 && b < 1.0)) {
        throw InvalidArgument("beta_" + std::to_string(t) + " = " + std::to_string(b) + " outside (0,1)");
      }
      beta_[t] = b;
      alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - b);
    }
    for (std::size_t t = 1; t <= T; ++t) {
      if (convention_ == SigmaConvention::kVariancePreserving) {
        sigma_[t] = std::sqrt(1.0 - alpha_bar_[t]);
      } else {
        sigma_[t] = std::sqrt((1.0 - alpha_bar_[t - 1]) / (1.0 - alpha_bar_[t]));
      }
    }
  }

  int steps() const noexcept { return static_cast<int>(beta_.size()) - 1; }
  SigmaConvention convention() const noexcept { return convention_; }

  double beta(int t) const { return beta_[checked(t, 1)]; }
  double alpha(int t) const { return 1.0 - beta(t); }
  double alpha_bar(int t) const { return alpha_bar_[checked(t, 0)]; }
  double sqrt_alpha_bar(int t) const { return std::sqrt(alpha_bar(t)); }
  double sigma(int t) const { return sigma_[checked(t, 0)]; }

  void require_timestep(int t) const { checked(t, 1); }

 private:
  std::size_t checked(int t, int lowest) const {
    if (t < lowest || t > steps()) {
      throw InvalidArgument("timestep " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                            std::to_string(steps()) + "]");
    }
    return static_cast<std::size_t>(t);
  }

  SigmaConvention convention_;
  std::vector<double> beta_;
  std::vector<double> alpha_bar_;
  std::vector<double> sigma_;
};

inline constexpr int kDefaultSteps = 1000;
inline constexpr double kDefaultBetaStart = 1e-4;
inline constexpr double kDefaultBetaEnd = 0.02;

/// Linearly spaced betas from beta_start to beta_end over T steps.
inline DiffusionSchedule make_linear_schedule(int T = kDefaultSteps, double beta_start = kDefaultBetaStart,
                                              double beta_end = kDefaultBetaEnd,
                                              SigmaConvention convention = SigmaConvention::kVariancePreserving) {
  if (T < 1) throw InvalidArgument("T must be >= 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw InvalidArgument("need 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) {
    const double f = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
    betas[static_cast<std::size_t>(i)] = beta_start + f * (beta_end - beta_start);
  }
  return DiffusionSchedule(std::move(betas), convention);
}

/// x_t = sqrt(alpha_bar_t) * x0 + sigma_t * eps, elementwise.
inline Tensor forward_noise(const DiffusionSchedule& schedule, const Tensor& x0, int t, const Tensor& eps) {
  schedule.require_timestep(t);
  if (!x0.same_dims(eps)) {
    throw InvalidArgument("noise dims " + dims_to_string(eps.dims()) + " differ from data dims " +
                          dims_to_string(x0.dims()));
  }
  const double a = schedule.sqrt_alpha_bar(t);
  const double s = schedule.sigma(t);
  Tensor xt(x0.dims());
  for (std::size_t i = 0; i < xt.size(); ++i) {
    xt[i] = static_cast<float>(a * x0[i] + s * eps[i]);
  }
  return xt;
}

/// Ground-truth noise (x_t - sqrt(alpha_bar_t) x0) / sigma_t.
inline Tensor true_noise(const DiffusionSchedule& schedule, const Tensor& x0, const Tensor& xt, int t) {
  schedule.require_timestep(t);
  if (!x0.same_dims(xt)) {
    throw InvalidArgument("x_t dims " + dims_to_string(xt.dims()) + " differ from x0 dims " +
                          dims_to_string(x0.dims()));
  }
  const double s = schedule.sigma(t);
  if (!(s > 0.0)) {
    throw DegenerateTimestep("sigma_" + std::to_string(t) + " is zero; ground-truth noise is undefined");
  }
  const double a = schedule.sqrt_alpha_bar(t);
  Tensor eps(x0.dims());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    eps[i] = static_cast<float>((static_cast<double>(xt[i]) - a * x0[i]) / s);
  }
  return eps;
}

}  // namespace diffpath
