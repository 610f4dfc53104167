#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace coocdyn {

/// The single generator used everywhere. Runs are reproducible on a given build.
using Rng = std::mt19937_64;

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent labeled sub-stream ("data", "init", "eval", "probe")
/// from the run seed.
inline Rng make_stream(std::uint64_t seed, std::string_view label) {
  const std::uint64_t tag = fnv1a64(label);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(tag >> 32)};
  return Rng(seq);
}

}  // namespace coocdyn
