#pragma once
// Seed derivation. Every random stream in the project is keyed by
// (master seed, stream tag, index) so results do not depend on evaluation
// order or worker count.

#include <cstdint>
#include <random>

namespace nullfwe {

using Seed = std::uint64_t;
using Rng = std::mt19937_64;

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

enum class Stream : std::uint64_t {
  subject = 1,
  cohort = 2,
  analysis = 3,
  monte_carlo = 4,
  permutation = 5,
  motion = 6,
  field = 7,
  artifact = 8,
};

inline constexpr Seed derive_seed(Seed master, Stream tag, std::uint64_t index = 0) noexcept {
  return splitmix64(splitmix64(master ^ splitmix64(static_cast<std::uint64_t>(tag))) + index);
}

inline Rng make_rng(Seed seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)};
  return Rng(seq);
}

}  // namespace nullfwe
