#pragma once

#include <cstdint>
#include <random>

namespace xunc {

using Rng = std::mt19937_64;

// Independent stream per (seed, stream) pair so per-sample work can be run
// in any order and still reproduce.
inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), 0x5851f42dU};
  return Rng(seq);
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  return rng();
}

}  // namespace xunc
