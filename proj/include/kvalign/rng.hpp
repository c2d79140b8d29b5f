#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "kvalign/common.hpp"

namespace kvalign {

// splitmix64 stream. All randomness in the project flows from one root
// seed through named streams, so any run is replayable from its config.
struct RngStream {
    uint64_t state = 0;

    RngStream() = default;
    explicit RngStream(uint64_t seed) : state(seed) {}

    uint64_t next_u64() {
        state += 0x9e3779b97f4a7c15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    // [0, 1)
    double uniform01() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    float uniform(float lo, float hi) {
        return lo + static_cast<float>(uniform01()) * (hi - lo);
    }

    // [0, n)
    int uniform_int(int n) {
        return static_cast<int>(uniform01() * static_cast<double>(n));
    }

    // Box-Muller; distributions are hand-rolled so streams are
    // bit-reproducible independent of the standard library.
    float normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 1e-300) u1 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        have_spare_ = true;
        return static_cast<float>(r * std::cos(a));
    }

    bool bernoulli(double p) { return uniform01() < p; }

  private:
    float spare_ = 0.0f;
    bool have_spare_ = false;
};

// Named-stream splitter over a single 64-bit root seed.
struct Rng {
    uint64_t seed = 0;

    Rng() = default;
    explicit Rng(uint64_t s) : seed(s) {}

    RngStream stream(const std::string& name) const {
        uint64_t h = fnv1a64(name);
        h ^= seed + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
        return RngStream(h);
    }
};

}  // namespace kvalign
