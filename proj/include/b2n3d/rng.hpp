#pragma once

#include <cstdint>
#include <random>

namespace b2n {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Independent stream seed for item `index` under a base seed.
inline std::uint64_t stream_seed(std::uint64_t base, std::uint64_t index, std::uint64_t salt = 0) {
  return splitmix64(splitmix64(base ^ (salt * 0xD6E8FEB86659FD93ULL)) + index);
}

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline int uniform_int(Rng& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

}  // namespace b2n
