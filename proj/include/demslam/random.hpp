#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace demslam {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Child seed for a named stage; every random stream derives from one root seed.
inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) noexcept {
  return splitmix64(root ^ fnv1a(stage));
}

inline constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t key) noexcept {
  return splitmix64(root ^ splitmix64(key + 0x632BE59BD9B4E019ULL));
}

/// Uniform double in [0, 1) from 53 high bits.
inline double unit_from_bits(std::uint64_t bits) noexcept {
  return static_cast<double>(bits >> 11) * 0x1.0p-53;
}

using Rng = std::mt19937_64;

}  // namespace demslam
