#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
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

struct DenoiserArch {
  std::size_t channels = 1;
  std::size_t features = 32;
  std::size_t embed_dim = 32;

  friend bool operator==(const DenoiserArch&, const DenoiserArch&) = default;
};

/// Named float32 parameter tensor.
struct Parameter {
  std::string name;
  Dims dims;
  std::vector<float> value;
};

using Gradient = std::vector<std::vector<double>>;

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double silu(double x) { return x * sigmoid(x); }
inline double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

/// Same-size 3×3 convolution with zero padding. in: cin×h×w, w: cout×cin×3×3.
inline void conv3x3(const double* in, std::size_t cin, std::size_t h, std::size_t w, const float* weight,
                    const float* bias, std::size_t cout, double* out) {
  const std::size_t hw = h * w;
  for (std::size_t o = 0; o < cout; ++o) {
    double* dst = out + o * hw;
    std::fill(dst, dst + hw, static_cast<double>(bias[o]));
    for (std::size_t i = 0; i < cin; ++i) {
      const double* src = in + i * hw;
      const float* k = weight + (o * cin + i) * 9;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const double kv = k[ky * 3 + kx];
          const std::size_t y0 = ky == 0 ? 1 : 0;
          const std::size_t y1 = ky == 2 ? h - 1 : h;
          const std::size_t x0 = kx == 0 ? 1 : 0;
          const std::size_t x1 = kx == 2 ? w - 1 : w;
          for (std::size_t y = y0; y < y1; ++y) {
            const double* srow = src + (y + ky - 1) * w;
            double* drow = dst + y * w;
            for (std::size_t x = x0; x < x1; ++x) drow[x] += kv * srow[x + kx - 1];
          }
        }
      }
    }
  }
}

/// Accumulates weight/bias gradients and (optionally) the input gradient.
inline void conv3x3_backward(const double* in, std::size_t cin, std::size_t h, std::size_t w, const float* weight,
                             std::size_t cout, const double* dout, double* dweight, double* dbias, double* din) {
  const std::size_t hw = h * w;
  if (din != nullptr) std::fill(din, din + cin * hw, 0.0);
  for (std::size_t o = 0; o < cout; ++o) {
    const double* g = dout + o * hw;
    dbias[o] += std::accumulate(g, g + hw, 0.0);
    for (std::size_t i = 0; i < cin; ++i) {
      const double* src = in + i * hw;
      double* dsrc = din != nullptr ? din + i * hw : nullptr;
      const std::size_t kbase = (o * cin + i) * 9;
      for (std::size_t ky = 0; ky < 3; ++ky) {
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const std::size_t y0 = ky == 0 ? 1 : 0;
          const std::size_t y1 = ky == 2 ? h - 1 : h;
          const std::size_t x0 = kx == 0 ? 1 : 0;
          const std::size_t x1 = kx == 2 ? w - 1 : w;
          const double kv = weight[kbase + ky * 3 + kx];
          double acc = 0.0;
          for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t row = (y + ky - 1) * w;
            const double* grow = g + y * w;
            const double* srow = src + row;
            for (std::size_t x = x0; x < x1; ++x) acc += grow[x] * srow[x + kx - 1];
            if (dsrc != nullptr) {
              double* drow = dsrc + row;
              for (std::size_t x = x0; x < x1; ++x) drow[x + kx - 1] += kv * grow[x];
            }
          }
          dweight[kbase + ky * 3 + kx] += acc;
        }
      }
    }
  }
}

}  // namespace detail

/// Sinusoidal timestep embedding of even or odd width `dim`.
inline std::vector<double> timestep_embedding(int t, std::size_t dim) {
  std::vector<double> e(dim);
  const std::size_t half = std::max<std::size_t>(dim / 2, 1);
  for (std::size_t i = 0; i < dim; ++i) {
    const std::size_t j = i / 2;
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    e[i] = (i % 2 == 0) ? std::sin(t * freq) : std::cos(t * freq);
  }
  return e;
}

/// Three 3×3 convolutions (C -> F -> F -> C) with SiLU activations. A learned
/// projection of the sinusoidal timestep embedding is added per channel after
/// the first layer.
class TinyDenoiser final : public NoisePredictor {
 public:
  enum Slot : std::size_t { kConv1W, kConv1B, kEmbedW, kEmbedB, kConv2W, kConv2B, kConv3W, kConv3B, kSlotCount };

  TinyDenoiser(DenoiserArch arch, std::uint64_t init_seed) : arch_(arch) {
    validate_arch();
    const std::size_t C = arch_.channels, F = arch_.features, E = arch_.embed_dim;
    params_ = {
        {"conv1.weight", {F, C, 3, 3}, {}}, {"conv1.bias", {F}, {}},
        {"embed.weight", {F, E}, {}},       {"embed.bias", {F}, {}},
        {"conv2.weight", {F, F, 3, 3}, {}}, {"conv2.bias", {F}, {}},
        {"conv3.weight", {C, F, 3, 3}, {}}, {"conv3.bias", {C}, {}},
    };
    Rng rng(init_seed);
    for (auto& p : params_) {
      p.value.assign(element_count(p.dims), 0.0f);
      if (p.dims.size() < 2) continue;
      const std::size_t fan_in = element_count(p.dims) / p.dims[0];
      double scale = std::sqrt(1.0 / static_cast<double>(fan_in));
      if (p.name == "conv3.weight") scale *= 0.1;
      std::normal_distribution<double> nd(0.0, scale);
      for (float& v : p.value) v = static_cast<float>(nd(rng));
    }
  }

  TinyDenoiser(DenoiserArch arch, std::vector<Parameter> params) : arch_(arch), params_(std::move(params)) {
    validate_arch();
    const TinyDenoiser reference(arch_, 0);
    if (params_.size() != reference.params_.size()) throw InvalidArgument("wrong number of denoiser parameters");
    for (std::size_t i = 0; i < params_.size(); ++i) {
      if (params_[i].name != reference.params_[i].name || params_[i].dims != reference.params_[i].dims ||
          params_[i].value.size() != element_count(params_[i].dims)) {
        throw InvalidArgument("denoiser parameter '" + params_[i].name + "' does not match the architecture");
      }
    }
  }

  const DenoiserArch& arch() const noexcept { return arch_; }
  const std::vector<Parameter>& parameters() const noexcept { return params_; }
  std::vector<Parameter>& parameters() noexcept { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  Gradient zero_gradient() const {
    Gradient g;
    for (const auto& p : params_) g.emplace_back(p.value.size(), 0.0);
    return g;
  }

  Tensor predict(const Tensor& xt, int t, std::string_view) const override {
    const ImageShape s = checked_shape(xt);
    Tensor out(xt.dims());
    Activations act(arch_, s.h, s.w);
    const std::size_t D = s.sample_size();
    for (std::size_t i = 0; i < s.n; ++i) {
      forward(xt.values().data() + i * D, t, s.h, s.w, act);
      for (std::size_t j = 0; j < D; ++j) out[i * D + j] = static_cast<float>(act.out[j]);
    }
    return out;
  }

  std::string name() const override { return "tiny-denoiser"; }

  /// Mean over the batch of ||eps_theta(x_t, t) - eps||^2. Accumulates the
  /// gradient with respect to every parameter into `grad` when given.
  double loss_and_gradient(const Tensor& xt, std::span<const int> timesteps, const Tensor& eps,
                           Gradient* grad) const {
    const ImageShape s = checked_shape(xt);
    if (!xt.same_dims(eps)) throw InvalidArgument("noise target dims differ from input dims");
    if (timesteps.size() != s.n) throw InvalidArgument("need one timestep per batch element");
    const std::size_t C = arch_.channels, F = arch_.features, E = arch_.embed_dim;
    const std::size_t hw = s.h * s.w;
    const std::size_t D = s.sample_size();
    const double inv_b = 1.0 / static_cast<double>(s.n);

    Activations act(arch_, s.h, s.w);
    std::vector<double> dout(C * hw), da2(F * hw), dh1(F * hw), dz1(F * hw), x(D);
    double total = 0.0;
    for (std::size_t i = 0; i < s.n; ++i) {
      const float* xi = xt.values().data() + i * D;
      forward(xi, timesteps[i], s.h, s.w, act);
      const float* ei = eps.values().data() + i * D;
      double sq = 0.0;
      for (std::size_t j = 0; j < D; ++j) {
        const double d = act.out[j] - ei[j];
        sq += d * d;
        dout[j] = 2.0 * d * inv_b;
      }
      total += sq;
      if (grad == nullptr) continue;

      auto& g = *grad;
      detail::conv3x3_backward(act.a2.data(), F, s.h, s.w, params_[kConv3W].value.data(), C, dout.data(),
                               g[kConv3W].data(), g[kConv3B].data(), da2.data());
      for (std::size_t j = 0; j < F * hw; ++j) da2[j] *= detail::silu_grad(act.z2[j]);
      detail::conv3x3_backward(act.h1.data(), F, s.h, s.w, params_[kConv2W].value.data(), F, da2.data(),
                               g[kConv2W].data(), g[kConv2B].data(), dh1.data());
      for (std::size_t f = 0; f < F; ++f) {
        const double de = std::accumulate(dh1.begin() + static_cast<std::ptrdiff_t>(f * hw),
                                          dh1.begin() + static_cast<std::ptrdiff_t>((f + 1) * hw), 0.0);
        g[kEmbedB][f] += de;
        for (std::size_t e = 0; e < E; ++e) g[kEmbedW][f * E + e] += de * act.embedding[e];
      }
      for (std::size_t j = 0; j < F * hw; ++j) dz1[j] = dh1[j] * detail::silu_grad(act.z1[j]);
      for (std::size_t j = 0; j < D; ++j) x[j] = xi[j];
      detail::conv3x3_backward(x.data(), C, s.h, s.w, params_[kConv1W].value.data(), F, dz1.data(),
                               g[kConv1W].data(), g[kConv1B].data(), nullptr);
    }
    return total * inv_b;
  }

  /// Plain SGD update p <- p - lr * g.
  void apply_sgd(const Gradient& grad, double lr) {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& v = params_[k].value;
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = static_cast<float>(v[j] - lr * grad[k][j]);
    }
  }

 private:
  struct Activations {
    Activations(const DenoiserArch& a, std::size_t h, std::size_t w)
        : x(a.channels * h * w), z1(a.features * h * w), h1(a.features * h * w), z2(a.features * h * w),
          a2(a.features * h * w), out(a.channels * h * w) {}
    std::vector<double> x, z1, h1, z2, a2, out;
    std::vector<double> embedding;
  };

  void validate_arch() const {
    if (arch_.channels == 0 || arch_.features == 0 || arch_.embed_dim == 0) {
      throw InvalidArgument("denoiser architecture sizes must be >= 1");
    }
  }

  ImageShape checked_shape(const Tensor& xt) const {
    const ImageShape s = image_shape_of(xt);
    if (s.c != arch_.channels) {
      throw InvalidArgument("denoiser expects " + std::to_string(arch_.channels) + " channels, got " +
                            std::to_string(s.c));
    }
    return s;
  }

  void forward(const float* xin, int t, std::size_t h, std::size_t w, Activations& act) const {
    const std::size_t C = arch_.channels, F = arch_.features, E = arch_.embed_dim;
    const std::size_t hw = h * w;
    for (std::size_t j = 0; j < C * hw; ++j) act.x[j] = xin[j];
    detail::conv3x3(act.x.data(), C, h, w, params_[kConv1W].value.data(), params_[kConv1B].value.data(), F,
                    act.z1.data());
    act.embedding = timestep_embedding(t, E);
    for (std::size_t f = 0; f < F; ++f) {
      double e = params_[kEmbedB].value[f];
      for (std::size_t k = 0; k < E; ++k) e += params_[kEmbedW].value[f * E + k] * act.embedding[k];
      for (std::size_t j = 0; j < hw; ++j) act.h1[f * hw + j] = detail::silu(act.z1[f * hw + j]) + e;
    }
    detail::conv3x3(act.h1.data(), F, h, w, params_[kConv2W].value.data(), params_[kConv2B].value.data(), F,
                    act.z2.data());
    for (std::size_t j = 0; j < F * hw; ++j) act.a2[j] = detail::silu(act.z2[j]);
    detail::conv3x3(act.a2.data(), F, h, w, params_[kConv3W].value.data(), params_[kConv3B].value.data(), C,
                    act.out.data());
  }

  DenoiserArch arch_;
  std::vector<Parameter> params_;
};

struct TrainOptions {
  int epochs = 10;
  double lr = 5e-5;  // loss is summed over pixels; scale with 1 / image size
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  DenoiserArch arch{};
  /// Called after every epoch with (epoch index, model, mean batch loss).
  std::function<void(int, const TinyDenoiser&, double)> on_epoch;
};

struct TrainResult {
  TinyDenoiser model;
  std::vector<double> epoch_loss;
};

/// SGD on the denoising objective: t ~ U{1..T}, eps ~ N(0, I) per example.
/// Deterministic for a fixed seed.
inline TrainResult train_denoiser(const Tensor& data, const DiffusionSchedule& schedule, const TrainOptions& opt) {
  const ImageShape s = image_shape_of(data);
  if (s.n == 0 || s.sample_size() == 0) throw InvalidArgument("training data is empty");
  if (!(opt.lr > 0.0)) throw InvalidArgument("learning rate must be > 0");
  if (opt.epochs < 1 || opt.batch_size == 0) throw InvalidArgument("epochs and batch size must be >= 1");
  DenoiserArch arch = opt.arch;
  arch.channels = s.c;

  TrainResult result{TinyDenoiser(arch, derive_seed(opt.seed, "init")), {}};
  TinyDenoiser& model = result.model;
  Rng rng(derive_seed(opt.seed, "train"));
  std::uniform_int_distribution<int> pick_t(1, schedule.steps());
  const std::size_t D = s.sample_size();

  std::vector<std::size_t> order(s.n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < s.n; start += opt.batch_size) {
      const std::size_t b = std::min(opt.batch_size, s.n - start);
      Tensor x0({b, s.c, s.h, s.w});
      for (std::size_t i = 0; i < b; ++i) {
        const auto src = data.values().subspan(order[start + i] * D, D);
        std::copy(src.begin(), src.end(), x0.values().begin() + static_cast<std::ptrdiff_t>(i * D));
      }
      std::vector<int> ts(b);
      Tensor eps({b, s.c, s.h, s.w});
      Tensor xt({b, s.c, s.h, s.w});
      for (std::size_t i = 0; i < b; ++i) {
        ts[i] = pick_t(rng);
        fill_normal(eps.values().subspan(i * D, D), rng);
        const double a = schedule.sqrt_alpha_bar(ts[i]);
        const double sg = schedule.sigma(ts[i]);
        for (std::size_t j = i * D; j < (i + 1) * D; ++j) xt[j] = static_cast<float>(a * x0[j] + sg * eps[j]);
      }
      Gradient grad = model.zero_gradient();
      const double loss = model.loss_and_gradient(xt, ts, eps, &grad);
      if (!std::isfinite(loss)) {
        throw DivergenceError("training loss became non-finite at epoch " + std::to_string(epoch));
      }
      model.apply_sgd(grad, opt.lr);
      loss_sum += loss;
      ++batches;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
    if (opt.on_epoch) opt.on_epoch(epoch, model, result.epoch_loss.back());
  }
  return result;
}

inline TrainResult train_denoiser(const ImageTensor& data, const DiffusionSchedule& schedule,
                                  const TrainOptions& opt) {
  return train_denoiser(data.tensor(), schedule, opt);
}

inline constexpr const char* kDenoiserManifest = "denoiser.txt";

// Weights directory: denoiser.txt lists the architecture and one
// "tensor <name> <file>" line per parameter; each file is a .dpv2 tensor.
inline void save_denoiser(const std::filesystem::path& dir, const TinyDenoiser& model) {
  std::filesystem::create_directories(dir);
  std::ostringstream os;
  os << "# diffpath tiny denoiser\n";
  os << "channels " << model.arch().channels << '\n';
  os << "features " << model.arch().features << '\n';
  os << "embed_dim " << model.arch().embed_dim << '\n';
  for (const auto& p : model.parameters()) {
    const std::string file = p.name + kTensorExtension;
    write_tensor_file(dir / file, Tensor(p.dims, p.value));
    os << "tensor " << p.name << ' ' << file << '\n';
  }
  write_text_file(dir / kDenoiserManifest, os.str());
}

inline TinyDenoiser load_denoiser(const std::filesystem::path& dir) {
  std::ifstream in(dir / kDenoiserManifest);
  if (!in) throw IoError("cannot open denoiser manifest in '" + dir.string() + "'");
  DenoiserArch arch;
  std::vector<Parameter> params;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "channels") {
      ls >> arch.channels;
    } else if (key == "features") {
      ls >> arch.features;
    } else if (key == "embed_dim") {
      ls >> arch.embed_dim;
    } else if (key == "tensor") {
      std::string name, file;
      ls >> name >> file;
      Tensor t = read_tensor_file(dir / file);
      params.push_back({name, t.dims(), std::vector<float>(t.values().begin(), t.values().end())});
    } else {
      throw InvalidArgument("unknown key '" + key + "' in denoiser manifest");
    }
  }
  return TinyDenoiser(arch, std::move(params));
}

}  // namespace diffpath
