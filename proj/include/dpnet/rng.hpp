#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace dpnet {

// Counter-based generator: draw k is a SplitMix64-style hash of (seed, k), so
// the stream depends only on (seed, counter) and is identical on every
// platform. Gaussian draws use an explicit Box-Muller pair instead of
// std::normal_distribution, whose output is implementation-defined.
class RngState {
public:
    explicit RngState(uint64_t seed = 0) : seed_(seed), counter_(0) {}

    uint64_t seed() const { return seed_; }
    uint64_t counter() const { return counter_; }
    void set_counter(uint64_t c) { counter_ = c; }

    // Derives an independent stream, e.g. one per generated image.
    RngState fork(uint64_t stream) const {
        return RngState(mix(seed_ + 0x9e3779b97f4a7c15ull * (stream + 1)));
    }

    uint64_t next_u64() { return mix(seed_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [lo, hi] inclusive.
    int64_t randint(int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(randint(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t mix(uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    uint64_t seed_;
    uint64_t counter_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace dpnet
