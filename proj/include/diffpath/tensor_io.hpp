#pragma once

// Binary tensor container (.dpv2), little-endian throughout:
//
//   offset  size      field
//   0       4         magic "DPV2"
//   4       2         version (u16, must be 1)
//   6       1         dtype code (u8, 0 = float32)
//   7       1         rank (u8, >= 1)
//   8       4*rank    dims (u32 each)
//   8+4*rank          payload, product(dims) float32 values

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "diffpath/error.hpp"
#include "diffpath/tensor.hpp"

namespace diffpath {

inline constexpr std::array<char, 4> kTensorMagic{'D', 'P', 'V', '2'};
inline constexpr std::uint16_t kTensorVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;
inline constexpr const char* kTensorExtension = ".dpv2";

struct TensorFileHeader {
  std::uint16_t version = kTensorVersion;
  std::uint8_t dtype = kDtypeFloat32;
  Dims dims;

  std::size_t byte_size() const { return 8 + 4 * dims.size(); }
};

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
  if (t.rank() == 0 || t.rank() > 255) throw InvalidArgument("tensor rank must be in [1, 255]");
  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  detail::put_u16(out, kTensorVersion);
  out.push_back(kDtypeFloat32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.dims()) {
    if (d > UINT32_MAX) throw InvalidArgument("tensor dimension exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  for (float v : t.values()) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
  return out;
}

inline TensorFileHeader decode_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw FormatError("truncated magic", bytes.size());
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin(),
                  [](char a, std::uint8_t b) { return static_cast<std::uint8_t>(a) == b; })) {
    throw FormatError("bad magic, expected \"DPV2\"", 0);
  }
  if (bytes.size() < 8) throw FormatError("truncated header", bytes.size());
  TensorFileHeader h;
  h.version = static_cast<std::uint16_t>(bytes[4] | (bytes[5] << 8));
  if (h.version != kTensorVersion) {
    throw FormatError("unsupported version " + std::to_string(h.version), 4);
  }
  h.dtype = bytes[6];
  if (h.dtype != kDtypeFloat32) throw FormatError("unsupported dtype code " + std::to_string(h.dtype), 6);
  const std::size_t rank = bytes[7];
  if (rank == 0) throw FormatError("rank must be >= 1", 7);
  if (bytes.size() < 8 + 4 * rank) throw FormatError("truncated dims", bytes.size());
  h.dims.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) h.dims[i] = detail::get_u32(bytes.data() + 8 + 4 * i);
  return h;
}

inline Tensor decode_tensor(std::span<const std::uint8_t> bytes) {
  const TensorFileHeader h = decode_header(bytes);
  const std::size_t offset = h.byte_size();
  const std::size_t count = element_count(h.dims);
  const std::size_t payload = bytes.size() - offset;
  if (payload != 4 * count) {
    throw FormatError("payload of " + std::to_string(payload) + " bytes does not match dims " +
                          dims_to_string(h.dims) + " (" + std::to_string(4 * count) + " bytes expected)",
                      offset + std::min(payload, 4 * count));
  }
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    data[i] = std::bit_cast<float>(detail::get_u32(bytes.data() + offset + 4 * i));
  }
  return Tensor(h.dims, std::move(data));
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path.string() + "'");
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return {bytes.begin(), bytes.end()};
}

/// Shortest round-trip-safe text for a double at 17 significant digits.
/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::general);
  return std::string(buf, r.ptr);
}

inline Tensor read_tensor_file(const std::filesystem::path& path) {
  try {
    return decode_tensor(read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what(), e.offset());
  }
}

inline void write_tensor_file(const std::filesystem::path& path, const Tensor& t) {
  write_file_bytes(path, encode_tensor(t));
}

inline ImageTensor read_image_file(const std::filesystem::path& path, ValueRange range) {
  return ImageTensor(read_tensor_file(path), range);
}

inline void write_tensor_file(const std::filesystem::path& path, const ImageTensor& x) {
  write_tensor_file(path, x.tensor());
}

/// One image batch file of a dataset split.
struct BatchFile {
  std::string stem;
  ImageTensor images;
};

/// All `.dpv2` batches of a split directory, in lexicographic file order.
inline std::vector<BatchFile> load_split(const std::filesystem::path& dir, ValueRange range) {
  if (!std::filesystem::is_directory(dir)) {
    throw IoError("dataset split directory '" + dir.string() + "' does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == kTensorExtension) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no " + std::string(kTensorExtension) + " files in '" + dir.string() + "'");
  std::vector<BatchFile> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back({f.stem().string(), read_image_file(f, range)});
  return out;
}

}  // namespace diffpath
