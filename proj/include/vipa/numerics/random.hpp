#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "vipa/numerics/tensor.hpp"

namespace vipa {

using Rng = std::mt19937_64;

/// splitmix64 finaliser; used to derive independent per-purpose seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t root, std::uint64_t purpose, std::uint64_t index = 0) {
  return mix_seed(mix_seed(root ^ mix_seed(purpose)) + index);
}

/// Fixed offsets splitting one root seed by purpose.
enum class SeedPurpose : std::uint64_t { data = 1, init = 2, gumbel = 3, shuffle = 4, augment = 5 };

constexpr std::uint64_t derive_seed(std::uint64_t root, SeedPurpose purpose, std::uint64_t index = 0) {
  return derive_seed(root, static_cast<std::uint64_t>(purpose), index);
}

/// Uniform draw strictly inside (0, 1), independent of the standard library's
/// distribution implementation.
inline double uniform_open01(Rng& rng) {
  return (static_cast<double>(rng() >> 11) + 0.5) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform_open01(rng); }

/// Gumbel(0, 1) draw from a uniform u in (0, 1).
inline double gumbel_from_uniform(double u) { return -std::log(-std::log(u)); }

template <typename T>
Tensor<T> sample_gumbel(const Shape& shape, Rng& rng);

template <typename T>
Tensor<T> sample_gumbel(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return sample_gumbel<T>(shape, rng);
}

}  // namespace vipa
