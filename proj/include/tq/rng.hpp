#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace tq {

// Deterministic splittable RNG (splitmix64 core). Identical seed gives a
// bit-identical draw sequence on every platform; std:: distributions are
// implementation-defined and must not be used anywhere in the artifact.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0) : state(seed) {}

    static uint64_t mix(uint64_t z) {
        z += 0x9E3779B97F4A7C15ull;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    uint64_t next_u64() {
        state += 0x9E3779B97F4A7C15ull;
        uint64_t z = state;
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Independent stream derived from the current state; advancing the child
    // never perturbs the parent.
    Rng fork(uint64_t stream) const { return Rng(mix(state ^ mix(stream + 0x632BE59BD9B4E019ull))); }

    // 53-bit mantissa construction, uniform in [0,1).
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    float uniformf(float lo, float hi) { return float(uniform(double(lo), double(hi))); }

    // Box-Muller without caching: two u64 draws per sample, fixed cost and order.
    double normal(double mu = 0.0, double sigma = 1.0) {
        double u1 = 0.0;
        do { u1 = uniform01(); } while (u1 <= 0.0);
        double u2 = uniform01();
        double r = std::sqrt(-2.0 * std::log(u1));
        return mu + sigma * r * std::cos(6.283185307179586476925287 * u2);
    }

    // Unbiased integer in [0, n) via rejection.
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        uint64_t lim = UINT64_MAX - UINT64_MAX % n;
        uint64_t v;
        do { v = next_u64(); } while (v >= lim);
        return v % n;
    }

    bool bernoulli(double p) { return uniform01() < p; }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }
};

}  // namespace tq
