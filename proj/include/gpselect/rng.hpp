#pragma once

#include <cstdint>
#include <random>

namespace gpselect {

using Rng = std::mt19937_64;

// Purposes keep the per-point streams of different phases disjoint.
enum class StreamPurpose : std::uint64_t {
  kSelection = 1,
  kGibbs = 2,
  kTargets = 3,
  kInit = 4,
  kFreeEnergy = 5,
  kReinit = 6,
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (master seed, iteration, data point, purpose).
// Parallel execution over points stays bit-reproducible.
inline Rng derive_stream(std::uint64_t seed, std::uint64_t iteration,
                         std::uint64_t index, StreamPurpose purpose) {
  std::uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ static_cast<std::uint64_t>(purpose));
  h = splitmix64(h ^ iteration);
  h = splitmix64(h ^ index);
  return Rng(h);
}

}  // namespace gpselect
