#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dpt {

using Rng = std::mt19937_64;

// Derives an independent seed for a named substream ("data", "mask",
// "decode", ...) or an indexed child stream, via splitmix64 mixing.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index);

inline Rng make_rng(std::uint64_t seed, std::string_view stream) { return Rng(derive_seed(seed, stream)); }

// Uniform in [0, 1).
inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

}  // namespace dpt
