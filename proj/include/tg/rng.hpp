#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace tg {

// Deterministic RNG. All floating-point draws are constructed from raw
// mt19937_64 output so streams are bit-identical across platforms;
// std::uniform_real_distribution and friends are implementation-defined
// and must not be used anywhere reproducibility matters.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be positive.
    uint64_t below(uint64_t n) { return next_u64() % n; }

    // Standard normal via Box-Muller, spare value cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();  // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Standard Gumbel: -log(-log(u)), u clamped away from {0, 1} so every
    // draw is finite.
    double gumbel() {
        double u = std::clamp(uniform(), 1e-12, 1.0 - 1e-12);
        return -std::log(-std::log(u));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Stateless seed combiner (splitmix64 finalizer) for deriving
    // per-step / per-item seeds from a base seed.
    static uint64_t mix(uint64_t a, uint64_t b) {
        uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_{false};
    double spare_{0.0};
};

}  // namespace tg
