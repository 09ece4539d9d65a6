#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "diffpath/error.hpp"

namespace diffpath {

/// Declared value interval of an image tensor.
enum class ValueRange {
  kUnit,    // [0, 1]
  kSigned,  // [-1, 1]
};

inline float range_low(ValueRange r) { return r == ValueRange::kUnit ? 0.0f : -1.0f; }
inline float range_high(ValueRange /*r*/) { return 1.0f; }

inline std::string_view to_string(ValueRange r) {
  return r == ValueRange::kUnit ? "unit" : "signed";
}

inline ValueRange parse_value_range(std::string_view s) {
  if (s == "unit") return ValueRange::kUnit;
  if (s == "signed") return ValueRange::kSigned;
  throw InvalidArgument("unknown value range '" + std::string(s) + "' (expected unit or signed)");
}

using Dims = std::vector<std::size_t>;

inline std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string dims_to_string(const Dims& dims) {
  std::string s = "(";
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(dims[i]);
  }
  return s + ")";
}

/// Dense row-major float tensor of arbitrary rank. Used for noise maps,
/// latents and model weights; carries no value-range contract.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Dims dims, float fill = 0.0f) : dims_(std::move(dims)) {
    data_.assign(element_count(dims_), fill);
  }

  Tensor(Dims dims, std::vector<float> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (data_.size() != element_count(dims_)) {
      throw InvalidArgument("tensor data length " + std::to_string(data_.size()) +
                            " does not match dims " + dims_to_string(dims_));
    }
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const float> values() const noexcept { return data_; }
  std::span<float> values() noexcept { return data_; }

  float operator[](std::size_t i) const { return data_[i]; }
  float& operator[](std::size_t i) { return data_[i]; }

  bool same_dims(const Tensor& other) const { return dims_ == other.dims_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Dims dims_;
  std::vector<float> data_;
};

/// (N, C, H, W) extents of an image batch.
struct ImageShape {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  std::size_t sample_size() const { return c * h * w; }
  std::size_t size() const { return n * c * h * w; }
  Dims dims() const { return {n, c, h, w}; }

  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline ImageShape image_shape_of(const Tensor& t) {
  if (t.rank() != 4) {
    throw InvalidArgument("expected a rank-4 (N,C,H,W) tensor, got dims " + dims_to_string(t.dims()));
  }
  return {t.dims()[0], t.dims()[1], t.dims()[2], t.dims()[3]};
}

/// Immutable N×C×H×W image batch whose elements are finite and lie in the
/// declared value range.
class ImageTensor {
 public:
  ImageTensor(Tensor data, ValueRange range) : data_(std::move(data)), range_(range) {
    shape_ = image_shape_of(data_);
    if (shape_.n == 0 || shape_.c == 0 || shape_.h == 0 || shape_.w == 0) {
      throw InvalidArgument("image dimensions must all be >= 1, got " + dims_to_string(data_.dims()));
    }
    const float lo = range_low(range_);
    const float hi = range_high(range_);
    const auto v = data_.values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) {
        throw InvalidArgument("non-finite image element at index " + std::to_string(i));
      }
      if (v[i] < lo || v[i] > hi) {
        throw InvalidArgument("image element " + std::to_string(v[i]) + " at index " + std::to_string(i) +
                              " outside declared " + std::string(to_string(range_)) + " range");
      }
    }
  }

  ImageTensor(ImageShape shape, std::vector<float> data, ValueRange range)
      : ImageTensor(Tensor(shape.dims(), std::move(data)), range) {}

  const ImageShape& shape() const noexcept { return shape_; }
  ValueRange range() const noexcept { return range_; }
  const Tensor& tensor() const noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_.values(); }

  float at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_.c + c) * shape_.h + h) * shape_.w + w];
  }

  /// Sample `i` as a 1×C×H×W tensor.
  Tensor sample(std::size_t i) const {
    if (i >= shape_.n) throw InvalidArgument("sample index out of range");
    const std::size_t len = shape_.sample_size();
    const auto v = values().subspan(i * len, len);
    return Tensor({1, shape_.c, shape_.h, shape_.w}, std::vector<float>(v.begin(), v.end()));
  }

 private:
  Tensor data_;
  ValueRange range_;
  ImageShape shape_;
};

/// Affine map between value ranges. Identity when source and target agree.
inline ImageTensor normalize(const ImageTensor& x, ValueRange target) {
  if (x.range() == target) return x;
  std::vector<float> out(x.values().begin(), x.values().end());
  if (target == ValueRange::kSigned) {
    for (float& v : out) v = std::clamp(2.0f * v - 1.0f, -1.0f, 1.0f);
  } else {
    for (float& v : out) v = std::clamp((v + 1.0f) * 0.5f, 0.0f, 1.0f);
  }
  return ImageTensor(x.shape(), std::move(out), target);
}

/// Sampling grid convention for bilinear resizing.
enum class PixelAlignment {
  kHalfPixel,    // pixel centers at (i + 0.5), align_corners = false
  kAlignCorners  // corner pixels map onto each other
};

namespace detail {

struct LinearTap {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

inline std::vector<LinearTap> linear_taps(std::size_t in, std::size_t out, PixelAlignment align) {
  std::vector<LinearTap> taps(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src;
    if (align == PixelAlignment::kHalfPixel) {
      src = (static_cast<double>(d) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    } else {
      src = out == 1 ? 0.0 : static_cast<double>(d) * static_cast<double>(in - 1) / static_cast<double>(out - 1);
    }
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(src));
    const std::size_t i1 = std::min(i0 + 1, in - 1);
    taps[d] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize of every (n, c) plane to out_h × out_w. Output values are
/// convex combinations of input values and keep the source value range.
inline ImageTensor resize_bilinear(const ImageTensor& x, std::size_t out_h, std::size_t out_w,
                                   PixelAlignment align = PixelAlignment::kHalfPixel) {
  if (out_h == 0 || out_w == 0) {
    throw InvalidArgument("resize target dimensions must be >= 1");
  }
  const ImageShape& s = x.shape();
  if (out_h == s.h && out_w == s.w) return x;

  const auto ytaps = detail::linear_taps(s.h, out_h, align);
  const auto xtaps = detail::linear_taps(s.w, out_w, align);
  const float lo = range_low(x.range());
  const float hi = range_high(x.range());

  ImageShape os{s.n, s.c, out_h, out_w};
  std::vector<float> out(os.size());
  const auto in = x.values();
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < s.n * s.c; ++plane) {
    const float* src = in.data() + plane * s.h * s.w;
    for (const auto& ty : ytaps) {
      const float* r0 = src + ty.i0 * s.w;
      const float* r1 = src + ty.i1 * s.w;
      for (const auto& tx : xtaps) {
        const double top = r0[tx.i0] + tx.frac * (static_cast<double>(r0[tx.i1]) - r0[tx.i0]);
        const double bot = r1[tx.i0] + tx.frac * (static_cast<double>(r1[tx.i1]) - r1[tx.i0]);
        const double v = top + ty.frac * (bot - top);
        out[o++] = std::clamp(static_cast<float>(v), lo, hi);
      }
    }
  }
  return ImageTensor(os, std::move(out), x.range());
}

/// Stack 1×C×H×W (or N×C×H×W) images of identical C, H, W and range.
inline ImageTensor concat_batches(std::span<const ImageTensor> parts) {
  if (parts.empty()) throw InvalidArgument("cannot concatenate an empty list of batches");
  const ImageShape first = parts.front().shape();
  std::vector<float> data;
  std::size_t n = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.c != first.c || s.h != first.h || s.w != first.w || p.range() != parts.front().range()) {
      throw InvalidArgument("batches disagree in C/H/W or value range");
    }
    data.insert(data.end(), p.values().begin(), p.values().end());
    n += s.n;
  }
  return ImageTensor(ImageShape{n, first.c, first.h, first.w}, std::move(data), parts.front().range());
}

}  // namespace diffpath
