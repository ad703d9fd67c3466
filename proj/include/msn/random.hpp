#pragma once

#include <cstdint>
#include <random>

namespace msn {

/// Streams drawn from the same (seed, iteration) pair must not collide.
enum class Stream : std::uint32_t { shuffle = 1, class_batch = 2, flip = 3, synthetic = 4, init = 5 };

/// Engine for one (seed, counter, stream) triple. Training derives every
/// random draw from the iteration number, so a resumed run replays the exact
/// sequence an uninterrupted one would.
inline std::mt19937_64 derive_rng(std::uint64_t seed, std::uint64_t counter, Stream stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(counter), static_cast<std::uint32_t>(counter >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace msn
