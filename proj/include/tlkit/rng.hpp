#pragma once

#include <cmath>
#include <cstdint>

namespace tlkit {

// Deterministic RNG (splitmix64 core). Not std::mt19937 + distributions on
// purpose: the standard distributions are implementation-defined, and the
// determinism contract covers generated datasets and checkpoints byte for
// byte.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

    // Standard normal via Box-Muller; the second deviate is cached.
    double normal() {
        if (has_cached_) {
            has_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        cached_ = r * std::sin(theta);
        has_cached_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal(0, stddev^2) resampled until within +-2 stddev.
    double truncated_normal(double stddev) {
        double z = normal();
        while (z < -2.0 || z > 2.0) z = normal();
        return z * stddev;
    }

    // Independent substream; used to key per-step batch sampling off
    // (seed, step) without mutating the parent stream.
    static Rng keyed(std::uint64_t seed, std::uint64_t key) {
        Rng mix(seed ^ (0x8f1bbcdcbfa53e0bULL * (key + 1)));
        mix.next_u64();
        return Rng(mix.next_u64());
    }

private:
    std::uint64_t state_;
    double cached_ = 0.0;
    bool has_cached_ = false;
};

}  // namespace tlkit
