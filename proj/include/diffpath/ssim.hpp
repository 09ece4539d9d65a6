#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/tensor.hpp"

namespace diffpath {

struct SsimOptions {
  int window = 11;
  double window_std = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Per-pixel SSIM, laid out C×H×W.
struct SsimMap {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  int window = 0;
  double window_std = 0.0;
  std::vector<double> values;

  double channel_mean(std::size_t c) const {
    const std::size_t hw = height * width;
    const auto first = values.begin() + static_cast<std::ptrdiff_t>(c * hw);
    return std::accumulate(first, first + static_cast<std::ptrdiff_t>(hw), 0.0) / static_cast<double>(hw);
  }

  /// Channel means, averaged.
  double mean() const {
    double s = 0.0;
    for (std::size_t c = 0; c < channels; ++c) s += channel_mean(c);
    return s / static_cast<double>(channels);
  }
};

namespace detail {

inline std::vector<double> gaussian_window(int size, double stddev) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const double r = (size - 1) / 2.0;
  for (int i = 0; i < size; ++i) {
    const double d = i - r;
    g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * stddev * stddev));
  }
  const double sum = std::accumulate(g.begin(), g.end(), 0.0);
  for (double& v : g) v /= sum;
  return g;
}

/// Mirror index without repeating the edge sample (d c b | a b c d | c b a).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto last = static_cast<std::ptrdiff_t>(n) - 1;
  if (last == 0) return 0;
  while (i < 0 || i > last) {
    if (i < 0) i = -i;
    if (i > last) i = 2 * last - i;
  }
  return static_cast<std::size_t>(i);
}

/// Separable Gaussian filter of one H×W plane with reflect padding.
inline void gaussian_filter(const double* in, std::size_t h, std::size_t w, const std::vector<double>& g,
                            double* out, std::vector<double>& scratch) {
  const auto r = static_cast<std::ptrdiff_t>(g.size() / 2);
  scratch.assign(h * w, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -r; k <= r; ++k) {
        acc += g[static_cast<std::size_t>(k + r)] * in[y * w + reflect_index(static_cast<std::ptrdiff_t>(x) + k, w)];
      }
      scratch[y * w + x] = acc;
    }
  }
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (std::ptrdiff_t k = -r; k <= r; ++k) {
        acc += g[static_cast<std::size_t>(k + r)] *
               scratch[reflect_index(static_cast<std::ptrdiff_t>(y) + k, h) * w + x];
      }
      out[y * w + x] = acc;
    }
  }
}

/// (C, H, W) of a rank-3 tensor or a rank-4 tensor with a batch of one.
inline ImageShape plane_shape(const Tensor& t) {
  if (t.rank() == 3) return {1, t.dims()[0], t.dims()[1], t.dims()[2]};
  if (t.rank() == 4 && t.dims()[0] == 1) return image_shape_of(t);
  throw InvalidArgument("expected a single C×H×W image, got dims " + dims_to_string(t.dims()));
}

}  // namespace detail

/// Rescales all elements affinely onto [0, 1]; a constant input maps to 0.
inline Tensor minmax_rescale(const Tensor& t) {
  Tensor out(t.dims());
  if (t.size() == 0) return out;
  const auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
  const double span = static_cast<double>(*hi) - *lo;
  if (!(span > 0.0)) return out;
  for (std::size_t i = 0; i < t.size(); ++i) {
    out[i] = std::clamp(static_cast<float>((t[i] - static_cast<double>(*lo)) / span), 0.0f, 1.0f);
  }
  return out;
}

/// Per-pixel, per-channel SSIM between two single images with a Gaussian
/// window. Inputs are used as given; callers rescale them to the dynamic range.
inline SsimMap ssim_map(const Tensor& a, const Tensor& b, const SsimOptions& opt = {}) {
  const ImageShape s = detail::plane_shape(a);
  if (!(detail::plane_shape(b) == s)) {
    throw InvalidArgument("SSIM inputs differ in shape: " + dims_to_string(a.dims()) + " vs " +
                          dims_to_string(b.dims()));
  }
  if (opt.window < 1 || opt.window % 2 == 0) throw InvalidArgument("SSIM window must be a positive odd size");
  if (static_cast<std::size_t>(opt.window) > s.h || static_cast<std::size_t>(opt.window) > s.w) {
    throw InvalidArgument("SSIM window " + std::to_string(opt.window) + " is larger than the " +
                          std::to_string(s.h) + "x" + std::to_string(s.w) + " image");
  }
  if (!(opt.window_std > 0.0)) throw InvalidArgument("SSIM window std must be > 0");

  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2);
  const double c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
  const auto g = detail::gaussian_window(opt.window, opt.window_std);
  const std::size_t hw = s.h * s.w;

  SsimMap map{s.c, s.h, s.w, opt.window, opt.window_std, std::vector<double>(s.c * hw)};
  std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
  std::vector<double> mx(hw), my(hw), mxx(hw), myy(hw), mxy(hw), scratch;
  for (std::size_t c = 0; c < s.c; ++c) {
    for (std::size_t j = 0; j < hw; ++j) {
      x[j] = a[c * hw + j];
      y[j] = b[c * hw + j];
      xx[j] = x[j] * x[j];
      yy[j] = y[j] * y[j];
      xy[j] = x[j] * y[j];
    }
    detail::gaussian_filter(x.data(), s.h, s.w, g, mx.data(), scratch);
    detail::gaussian_filter(y.data(), s.h, s.w, g, my.data(), scratch);
    detail::gaussian_filter(xx.data(), s.h, s.w, g, mxx.data(), scratch);
    detail::gaussian_filter(yy.data(), s.h, s.w, g, myy.data(), scratch);
    detail::gaussian_filter(xy.data(), s.h, s.w, g, mxy.data(), scratch);
    for (std::size_t j = 0; j < hw; ++j) {
      const double vx = mxx[j] - mx[j] * mx[j];
      const double vy = myy[j] - my[j] * my[j];
      const double cov = mxy[j] - mx[j] * my[j];
      const double num = (2.0 * mx[j] * my[j] + c1) * (2.0 * cov + c2);
      const double den = (mx[j] * mx[j] + my[j] * my[j] + c1) * (vx + vy + c2);
      map.values[c * hw + j] = std::clamp(num / den, -1.0, 1.0);
    }
  }
  return map;
}

}  // namespace diffpath
