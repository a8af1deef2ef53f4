#pragma once

#include "mfslq/common.hpp"

#include <cmath>

namespace mfslq {

namespace rng {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Purpose tags keep the (path, step) substreams for Brownian increments,
// per-mark jump counts and perturbation directions independent.
enum Purpose : std::uint64_t {
    kBrownian = 0x42,
    kJumpBase = 0x4A00,  // + mark index
    kDirection = 0x44,
    kLsmcBrownian = 0x4C,
    kLsmcJumpBase = 0x4D00,
};

}  // namespace rng

// Stateless-keyed counter stream: every draw is a hash of
// (seed, path, step, purpose, counter). Draws are reproducible for a
// given key regardless of evaluation order across paths or threads.
class SubStream {
  public:
    SubStream(std::uint64_t seed, std::uint64_t path, std::uint64_t step, std::uint64_t purpose) {
        std::uint64_t k = rng::splitmix64(seed ^ 0x8E1F0C107D4EC535ULL);
        k = rng::splitmix64(k ^ (path * 0xA24BAED4963EE407ULL));
        k = rng::splitmix64(k ^ (step * 0x9FB21C651E98DF25ULL));
        key_ = rng::splitmix64(k ^ (purpose * 0xD1B54A32D192ED03ULL));
    }

    std::uint64_t next_u64() { return rng::splitmix64(key_ + 0x632BE59BD9B4E019ULL * (++counter_)); }

    // uniform in (0, 1)
    double next_uniform() { return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53; }

    // uniform in [-1, 1]
    double next_symmetric() { return 2.0 * next_uniform() - 1.0; }

    // standard normal by Box-Muller
    double next_normal() {
        double u1 = next_uniform();
        double u2 = next_uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // Poisson count by inversion; large means are split into chunks,
    // which is exact by infinite divisibility.
    long next_poisson(double mean) {
        long total = 0;
        while (mean > 0.0) {
            double chunk = std::min(mean, 30.0);
            mean -= chunk;
            double p = std::exp(-chunk);
            double cdf = p;
            double u = next_uniform();
            long k = 0;
            while (u > cdf && k < 10000) {
                ++k;
                p *= chunk / static_cast<double>(k);
                cdf += p;
            }
            total += k;
        }
        return total;
    }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
};

}  // namespace mfslq
