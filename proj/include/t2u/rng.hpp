#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string_view>

namespace t2u {

// Portable random stream.
//
// Raw bits come from std::mt19937_64, whose output sequence is fixed by the
// C++ standard. Everything derived from it is computed here rather than with
// <random> distributions (whose algorithms are implementation-defined):
//   uniform()      = (next() >> 11) * 2^-53            in [0, 1)
//   uniform_int(n) = rejection sampling on next() to avoid modulo bias
//   normal()       = Box-Muller on two uniforms, no caching of the pair
// Named sub-streams are seeded with splitmix64(seed ^ fnv1a64(name)).
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    static std::uint64_t splitmix64(std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    static std::uint64_t fnv1a64(std::string_view s) {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

    static Rng stream(std::uint64_t seed, std::string_view name) {
        return Rng(splitmix64(seed ^ fnv1a64(name)));
    }

    std::uint64_t next() { return engine_(); }

    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
        std::uint64_t x;
        do {
            x = next();
        } while (x >= limit);
        return x % n;
    }

    double normal() {
        double u1 = uniform();
        const double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal restricted to [-2, 2] standard deviations by resampling.
    double truncated_normal(double stddev) {
        double z;
        do {
            z = normal();
        } while (z < -2.0 || z > 2.0);
        return stddev * z;
    }

private:
    std::mt19937_64 engine_;
};

}  // namespace t2u
