#pragma once

#include <cmath>
#include <cstdint>

namespace kt {

/// Counter-based deterministic generator. Each draw hashes (seed, counter)
/// with the SplitMix64 finalizer, so streams depend only on the seed and the
/// number of values drawn, never on platform RNG state. Gaussians use
/// Box-Muller on two consecutive uniforms (two counter increments per draw).
class SeededRng {
  public:
    explicit SeededRng(uint64_t seed) : seed_(seed) {}

    uint64_t next_u64() {
        uint64_t z = seed_ + counter_ * 0x9e3779b97f4a7c15ull + 0x9e3779b97f4a7c15ull;
        ++counter_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Standard normal via Box-Muller; the sine partner is discarded.
    double gaussian() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Integer in [0, n).
    uint64_t below(uint64_t n) { return next_u64() % n; }

    uint64_t seed() const { return seed_; }
    uint64_t position() const { return counter_; }

  private:
    uint64_t seed_;
    uint64_t counter_ = 0;
};

}  // namespace kt
