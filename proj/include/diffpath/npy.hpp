#pragma once

// Reader for NumPy .npy arrays (format versions 1-3, C order) holding
// uint8, float32 or float64 data.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <type_traits>
#include <string>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/tensor.hpp"
#include "diffpath/tensor_io.hpp"

namespace diffpath {

struct NpyArray {
  Dims shape;
  std::string descr;  // e.g. "<f4", "|u1"
  std::vector<double> values;
};

namespace detail {

inline std::string npy_header_field(const std::string& header, const std::string& key) {
  const auto k = header.find("'" + key + "'");
  if (k == std::string::npos) throw FormatError("npy header lacks '" + key + "'", 8);
  auto v = header.find(':', k);
  if (v == std::string::npos) throw FormatError("npy header field '" + key + "' has no value", 8);
  ++v;
  while (v < header.size() && header[v] == ' ') ++v;
  if (v >= header.size()) throw FormatError("npy header field '" + key + "' has no value", 8);
  const char open = header[v];
  const char close = open == '(' ? ')' : open;
  if (open == '(' || open == '\'' || open == '"') {
    const auto end = header.find(close, v + 1);
    if (end == std::string::npos) throw FormatError("npy header field '" + key + "' is unterminated", 8);
    return header.substr(v + 1, end - v - 1);
  }
  const auto end = header.find_first_of(",}", v);
  return header.substr(v, end - v);
}

template <typename T>
T load_le(const std::uint8_t* p) {
  using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(p[i]) << (8 * i);
  return std::bit_cast<T>(u);
}

}  // namespace detail

inline NpyArray decode_npy(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t kMagic[6] = {0x93, 'N', 'U', 'M', 'P', 'Y'};
  if (bytes.size() < 10 || std::memcmp(bytes.data(), kMagic, 6) != 0) throw FormatError("not an npy file", 0);
  const int major = bytes[6];
  std::size_t header_len = 0, offset = 0;
  if (major == 1) {
    header_len = bytes[8] | (static_cast<std::size_t>(bytes[9]) << 8);
    offset = 10;
  } else if (major == 2 || major == 3) {
    if (bytes.size() < 12) throw FormatError("truncated npy header", bytes.size());
    header_len = 0;
    for (int i = 0; i < 4; ++i) header_len |= static_cast<std::size_t>(bytes[8 + i]) << (8 * i);
    offset = 12;
  } else {
    throw FormatError("unsupported npy version " + std::to_string(major), 6);
  }
  if (bytes.size() < offset + header_len) throw FormatError("truncated npy header", bytes.size());
  const std::string header(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                           bytes.begin() + static_cast<std::ptrdiff_t>(offset + header_len));
  offset += header_len;

  NpyArray a;
  a.descr = detail::npy_header_field(header, "descr");
  if (detail::npy_header_field(header, "fortran_order").find("True") != std::string::npos) {
    throw FormatError("Fortran-ordered npy arrays are not supported", 8);
  }
  std::string shape = detail::npy_header_field(header, "shape");
  for (std::size_t pos = 0; pos < shape.size();) {
    const auto comma = shape.find(',', pos);
    const std::string item = shape.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (item.find_first_not_of(' ') != std::string::npos) a.shape.push_back(std::stoull(item));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }

  std::size_t width = 0;
  if (a.descr == "|u1" || a.descr == "<u1" || a.descr == "u1") {
    width = 1;
  } else if (a.descr == "<f4") {
    width = 4;
  } else if (a.descr == "<f8") {
    width = 8;
  } else {
    throw FormatError("unsupported npy dtype '" + a.descr + "' (need uint8, <f4 or <f8)", 8);
  }
  const std::size_t n = element_count(a.shape);
  if (bytes.size() - offset != n * width) {
    throw FormatError("npy payload holds " + std::to_string(bytes.size() - offset) + " bytes, shape " +
                          dims_to_string(a.shape) + " needs " + std::to_string(n * width),
                      offset);
  }
  a.values.resize(n);
  const std::uint8_t* p = bytes.data() + offset;
  for (std::size_t i = 0; i < n; ++i) {
    if (width == 1) {
      a.values[i] = p[i];
    } else if (width == 4) {
      a.values[i] = detail::load_le<float>(p + 4 * i);
    } else {
      a.values[i] = detail::load_le<double>(p + 8 * i);
    }
  }
  return a;
}

inline NpyArray read_npy(const std::filesystem::path& path) {
  try {
    return decode_npy(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

enum class PixelLayout { kNCHW, kNHWC };

/// Converts an npy image array to an N×C×H×W batch. uint8 data is scaled by
/// 1/255 onto [0, 1]; float data is taken as lying in `range`. Rank-3 input
/// is read as N×H×W with one channel.
inline ImageTensor npy_to_images(const NpyArray& a, PixelLayout layout, ValueRange range) {
  Dims d = a.shape;
  if (d.size() == 3) d.insert(layout == PixelLayout::kNCHW ? d.begin() + 1 : d.end(), 1);
  if (d.size() != 4) throw InvalidArgument("npy image array must have rank 3 or 4, got " + dims_to_string(a.shape));
  const bool bytes = a.descr.find("u1") != std::string::npos;
  const double scale = bytes ? 1.0 / 255.0 : 1.0;
  if (bytes) range = ValueRange::kUnit;
  const std::size_t N = d[0];
  const std::size_t C = layout == PixelLayout::kNCHW ? d[1] : d[3];
  const std::size_t H = layout == PixelLayout::kNCHW ? d[2] : d[1];
  const std::size_t W = layout == PixelLayout::kNCHW ? d[3] : d[2];
  std::vector<float> v(a.values.size());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const std::size_t src = layout == PixelLayout::kNCHW ? ((n * C + c) * H + y) * W + x
                                                               : ((n * H + y) * W + x) * C + c;
          v[((n * C + c) * H + y) * W + x] = static_cast<float>(a.values[src] * scale);
        }
      }
    }
  }
  return ImageTensor(Tensor({N, C, H, W}, std::move(v)), range);
}

}  // namespace diffpath
