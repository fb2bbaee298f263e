// Counter-splittable PRNG with portable uniform/normal draws.
//
// std::uniform_real_distribution and friends are not pinned by the standard,
// so every stochastic choice in the library goes through this generator to
// keep seeded runs bitwise reproducible.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace rvernet {

// splitmix64: tiny, well-mixed, passes BigCrush as a stream seeder.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed) : state_(seed) {
        // Warm up so trivially related seeds (0,1,2,...) decorrelate.
        splitmix64(state_);
        splitmix64(state_);
    }

    uint64_t next_u64() { return splitmix64(state_); }

    // Derives an independent stream; (seed, key...) -> child seed is a pure
    // function, so per-sample streams are stable under any parallel schedule.
    Rng split(uint64_t key) const {
        uint64_t s = state_ ^ (0x517cc1b727220a95ULL * (key + 1));
        return Rng(s);
    }
    Rng split(uint64_t key1, uint64_t key2) const { return split(key1).split(key2); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return (double)(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Unbiased integer in [0, n) by rejection.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) return 0;
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    // Box-Muller, one value per call (the pair's second half is dropped to
    // keep the draw count predictable).
    double normal() {
        double u1;
        do { u1 = uniform(); } while (u1 <= 0.0);
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Normal clipped to +/- 2 sigma by resampling.
    double truncated_normal(double stddev) {
        for (;;) {
            double z = normal();
            if (z >= -2.0 && z <= 2.0) return z * stddev;
        }
    }

    bool bernoulli(double p) { return uniform() < p; }

    // Fisher-Yates; uniform over all permutations of [0, n).
    std::vector<int64_t> permutation(int64_t n) {
        std::vector<int64_t> p(n);
        for (int64_t i = 0; i < n; ++i) p[i] = i;
        for (int64_t i = n - 1; i > 0; --i) {
            int64_t j = (int64_t)uniform_int((uint64_t)(i + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int64_t i = (int64_t)v.size() - 1; i > 0; --i) {
            int64_t j = (int64_t)uniform_int((uint64_t)(i + 1));
            std::swap(v[i], v[j]);
        }
    }

private:
    uint64_t state_;
};

}  // namespace rvernet
