#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

#include "diffpath/tensor.hpp"

namespace diffpath {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Child seed from a master seed and a stable name (FNV-1a of the name mixed
/// with the master). Adding a new name never changes the seeds of others.
inline std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return splitmix64(master ^ splitmix64(h));
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 0x632be59bd9b4e019ULL));
}

inline void fill_normal(std::span<float> out, Rng& rng) {
  std::normal_distribution<double> n01(0.0, 1.0);
  for (float& v : out) v = static_cast<float>(n01(rng));
}

inline Tensor normal_tensor(Dims dims, Rng& rng) {
  Tensor t(std::move(dims));
  fill_normal(t.values(), rng);
  return t;
}

}  // namespace diffpath
