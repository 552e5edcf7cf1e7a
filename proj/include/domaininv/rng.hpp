#pragma once

#include <cstdint>
#include <random>

namespace domaininv {

using Rng = std::mt19937_64;

// Independent, reproducible streams keyed by (seed, stream, index).
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t index = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

// Stream tags so unrelated consumers of one seed never share a sequence.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kDropout = 2;
inline constexpr std::uint64_t kSwd = 3;
inline constexpr std::uint64_t kSampler = 4;
inline constexpr std::uint64_t kSynth = 5;
inline constexpr std::uint64_t kShuffle = 6;
}  // namespace streams

}  // namespace domaininv
