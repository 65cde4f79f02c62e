#pragma once

#include <cmath>
#include <cstdint>

namespace clab {

// Deterministic, serializable PRNG. splitmix64 core: a single u64 of state,
// so checkpoints and derived worker streams carry it verbatim.
struct Rng {
    std::uint64_t state{0x9e3779b97f4a7c15ull};

    Rng() = default;
    explicit Rng(std::uint64_t seed) : state(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t threshold = -n % n;  // 2^64 mod n
        for (;;) {
            const std::uint64_t r = next_u64();
            if (r >= threshold) { return r % n; }
        }
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Standard normal (Box-Muller, no cached spare: two uniforms per draw).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) { u1 = uniform(); }
        const double u2 = uniform();
        const double two_pi = 6.283185307179586476925286766559;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(two_pi * u2);
    }

    // Derive an independent child stream; advances this stream once.
    Rng split() { return Rng(next_u64() ^ 0xd1b54a32d192ed03ull); }
};

}  // namespace clab
