#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/predictor.hpp"
#include "diffpath/random.hpp"
#include "diffpath/schedule.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"

namespace diffpath {

/// Isotropic Gaussian mixture over C×H×W images:
/// p_0(x) = sum_k w_k N(x; mu_k, s_k^2 I).
class GaussianMixtureDataModel {
 public:
  GaussianMixtureDataModel(ImageShape sample_shape, std::vector<double> weights, std::vector<Tensor> means,
                           std::vector<double> stds)
      : shape_(sample_shape), weights_(std::move(weights)), means_(std::move(means)), stds_(std::move(stds)) {
    shape_.n = 1;
    const std::size_t K = weights_.size();
    if (K == 0) throw InvalidArgument("mixture needs at least one component");
    if (means_.size() != K || stds_.size() != K) {
      throw InvalidArgument("mixture weights, means and stds must have the same length");
    }
    double total = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      if (!(weights_[k] > 0.0)) throw InvalidArgument("mixture weight " + std::to_string(k) + " must be > 0");
      if (!(stds_[k] > 0.0)) throw InvalidArgument("mixture std " + std::to_string(k) + " must be > 0");
      if (means_[k].size() != shape_.sample_size()) {
        throw InvalidArgument("mixture mean " + std::to_string(k) + " has the wrong element count");
      }
      means_[k] = Tensor(shape_.dims(), std::vector<float>(means_[k].values().begin(), means_[k].values().end()));
      total += weights_[k];
    }
    if (std::abs(total - 1.0) > 1e-9) throw InvalidArgument("mixture weights must sum to 1");
  }

  std::size_t components() const noexcept { return weights_.size(); }
  const ImageShape& sample_shape() const noexcept { return shape_; }
  std::size_t dim() const noexcept { return shape_.sample_size(); }
  double weight(std::size_t k) const { return weights_.at(k); }
  double stddev(std::size_t k) const { return stds_.at(k); }
  const Tensor& mean(std::size_t k) const { return means_.at(k); }
  const std::vector<double>& weights() const noexcept { return weights_; }
  const std::vector<double>& stds() const noexcept { return stds_; }

  /// Draws n samples as an N×C×H×W tensor (unclipped).
  Tensor sample(std::size_t n, Rng& rng) const {
    std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
    std::normal_distribution<double> n01(0.0, 1.0);
    const std::size_t D = dim();
    Tensor out({n, shape_.c, shape_.h, shape_.w});
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = pick(rng);
      for (std::size_t j = 0; j < D; ++j) {
        out[i * D + j] = static_cast<float>(means_[k][j] + stds_[k] * n01(rng));
      }
    }
    return out;
  }

  /// Same mixture with every mean moved by `offset_in_stds * s_k` in every element.
  GaussianMixtureDataModel shifted(double offset_in_stds) const {
    std::vector<Tensor> moved = means_;
    for (std::size_t k = 0; k < moved.size(); ++k) {
      for (float& v : moved[k].values()) v = static_cast<float>(v + offset_in_stds * stds_[k]);
    }
    return {shape_, weights_, std::move(moved), stds_};
  }

 private:
  ImageShape shape_;
  std::vector<double> weights_;
  std::vector<Tensor> means_;
  std::vector<double> stds_;
};

/// Mixture with K equally weighted components whose means are drawn
/// uniformly from [-mean_scale, mean_scale] per element.
inline GaussianMixtureDataModel make_random_mixture(std::size_t K, ImageShape shape, double mean_scale,
                                                    double stddev, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-mean_scale, mean_scale);
  shape.n = 1;
  std::vector<Tensor> means;
  for (std::size_t k = 0; k < K; ++k) {
    Tensor m(shape.dims());
    for (float& v : m.values()) v = static_cast<float>(u(rng));
    means.push_back(std::move(m));
  }
  return {shape, std::vector<double>(K, 1.0 / static_cast<double>(K)), std::move(means),
          std::vector<double>(K, stddev)};
}

/// Samples from the mixture, clamped into [-1, 1] so they form a valid signed
/// image batch.
inline ImageTensor sample_images(const GaussianMixtureDataModel& model, std::size_t n, Rng& rng) {
  Tensor raw = model.sample(n, rng);
  for (float& v : raw.values()) v = std::clamp(v, -1.0f, 1.0f);
  return ImageTensor(std::move(raw), ValueRange::kSigned);
}

/// Exact noise predictor for mixture data. Pushing component k through the
/// forward process gives N(sqrt(abar_t) mu_k, (abar_t s_k^2 + sigma_t^2) I);
/// the prediction is -sigma_t times the score of that closed-form marginal.
class AnalyticPredictor final : public NoisePredictor {
 public:
  AnalyticPredictor(GaussianMixtureDataModel model, DiffusionSchedule schedule)
      : model_(std::move(model)), schedule_(std::move(schedule)) {}

  Tensor predict(const Tensor& xt, int t, std::string_view) const override {
    schedule_.require_timestep(t);
    const std::size_t D = model_.dim();
    const ImageShape in = image_shape_of(xt);
    const ImageShape& m = model_.sample_shape();
    if (in.c != m.c || in.h != m.h || in.w != m.w) {
      throw ContractError("input per-sample shape " + dims_to_string({in.c, in.h, in.w}) +
                          " does not match the mixture's " + dims_to_string({m.c, m.h, m.w}));
    }
    const std::size_t n = in.n;
    const std::size_t K = model_.components();
    const double a = schedule_.sqrt_alpha_bar(t);
    const double sig = schedule_.sigma(t);
    const double abar = schedule_.alpha_bar(t);

    std::vector<double> var(K);
    std::vector<double> log_norm(K);
    for (std::size_t k = 0; k < K; ++k) {
      const double s = model_.stddev(k);
      var[k] = abar * s * s + sig * sig;
      log_norm[k] = std::log(model_.weight(k)) - 0.5 * static_cast<double>(D) * std::log(2.0 * std::numbers::pi * var[k]);
    }

    Tensor out(xt.dims());
    std::vector<double> logr(K);
    std::vector<double> acc(D);
    for (std::size_t i = 0; i < n; ++i) {
      const float* x = xt.values().data() + i * D;
      for (std::size_t k = 0; k < K; ++k) {
        const auto mu = model_.mean(k).values();
        double sq = 0.0;
        for (std::size_t j = 0; j < D; ++j) {
          const double d = x[j] - a * mu[j];
          sq += d * d;
        }
        logr[k] = log_norm[k] - 0.5 * sq / var[k];
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (double l : logr) mx = std::max(mx, l);
      double z = 0.0;
      for (double& l : logr) {
        l = std::exp(l - mx);
        z += l;
      }
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t k = 0; k < K; ++k) {
        const double r = logr[k] / z;
        if (r == 0.0) continue;
        const auto mu = model_.mean(k).values();
        const double c = r / var[k];
        for (std::size_t j = 0; j < D; ++j) acc[j] += c * (x[j] - a * mu[j]);
      }
      for (std::size_t j = 0; j < D; ++j) out[i * D + j] = static_cast<float>(sig * acc[j]);
    }
    return out;
  }

  std::string name() const override { return "analytic"; }
  std::string training_distribution() const override {
    return "gaussian-mixture(K=" + std::to_string(model_.components()) + ")";
  }

  const GaussianMixtureDataModel& model() const noexcept { return model_; }

 private:
  GaussianMixtureDataModel model_;
  DiffusionSchedule schedule_;
};

// Mixture description file:
//   # diffpath gaussian mixture
//   shape C H W
//   weights w_1 ... w_K
//   stds s_1 ... s_K
//   means <tensor file, K×C×H×W, relative to this file>

inline void save_mixture(const std::filesystem::path& path, const GaussianMixtureDataModel& model) {
  const auto& s = model.sample_shape();
  const std::size_t K = model.components();
  const std::filesystem::path means_file = path.stem().string() + "_means" + kTensorExtension;
  Tensor means({K, s.c, s.h, s.w});
  for (std::size_t k = 0; k < K; ++k) {
    const auto mk = model.mean(k).values();
    std::copy(mk.begin(), mk.end(), means.values().begin() + static_cast<std::ptrdiff_t>(k * model.dim()));
  }
  write_tensor_file(path.parent_path() / means_file, means);

  std::ostringstream os;
  os << "# diffpath gaussian mixture\n";
  os << "shape " << s.c << ' ' << s.h << ' ' << s.w << '\n';
  os << "weights";
  for (double w : model.weights()) os << ' ' << format_double(w);
  os << "\nstds";
  for (double v : model.stds()) os << ' ' << format_double(v);
  os << "\nmeans " << means_file.string() << '\n';
  write_text_file(path, os.str());
}

inline GaussianMixtureDataModel load_mixture(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open mixture file '" + path.string() + "'");
  ImageShape shape;
  std::vector<double> weights, stds;
  std::string means_file;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "shape") {
      ls >> shape.c >> shape.h >> shape.w;
    } else if (key == "weights") {
      for (double v; ls >> v;) weights.push_back(v);
    } else if (key == "stds") {
      for (double v; ls >> v;) stds.push_back(v);
    } else if (key == "means") {
      ls >> means_file;
    } else {
      throw InvalidArgument("unknown key '" + key + "' in mixture file '" + path.string() + "'");
    }
  }
  if (means_file.empty()) throw InvalidArgument("mixture file '" + path.string() + "' names no means tensor");
  const Tensor means = read_tensor_file(path.parent_path() / means_file);
  const std::size_t D = shape.sample_size();
  if (means.size() != weights.size() * D) {
    throw InvalidArgument("means tensor size does not match K×C×H×W in '" + path.string() + "'");
  }
  std::vector<Tensor> mus;
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const auto v = means.values().subspan(k * D, D);
    mus.emplace_back(shape.dims(), std::vector<float>(v.begin(), v.end()));
  }
  return {shape, std::move(weights), std::move(mus), std::move(stds)};
}

}  // namespace diffpath
