// Seed derivation for independent random streams. Every stochastic
// component takes an explicit seed so runs replay exactly.
#pragma once

#include <cstdint>
#include <random>

namespace evofilter {

/// splitmix64 step; used only to derive well-mixed child seeds.
inline std::uint64_t mix_seed(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Derive the seed of substream `index` of stream `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
    return mix_seed(seed ^ mix_seed(index + 1));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(seed, index));
}

} // namespace evofilter
