#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace lmt {

// Deterministic generator with explicit distributions. std:: distributions are
// implementation-defined, so sampling here stays bit-stable across toolchains.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ull) {}

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    int64_t uniform_int(int64_t n) { return int64_t(next_u64() % uint64_t(n)); }

    double normal() {
        // Box-Muller without caching so draw order stays obvious
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double gumbel() {
        double u = uniform();
        if (u < 1e-300) u = 1e-300;
        double l = -std::log(u);
        if (l < 1e-300) l = 1e-300;
        return -std::log(l);
    }

    // independent stream derived from a label; gives each component its own seed
    Rng derive(std::string_view label) const {
        uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h ^= uint64_t(uint8_t(c));
            h *= 0x100000001b3ull;
        }
        return Rng(state_ ^ h);
    }

    Rng derive(int64_t n) const { return Rng(state_ ^ (0x9e3779b97f4a7c15ull * uint64_t(n + 1))); }

  private:
    uint64_t state_;
};

}  // namespace lmt
