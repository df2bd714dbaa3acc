#pragma once

#include "jepat/tensor.hpp"

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace jepat {

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9E3779B97F4A7C15ull;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// xoshiro256++ with explicit 4-word state so it serializes into checkpoints
/// and behaves identically on every platform.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Box-Muller; draws two uniforms per call, keeps no spare.
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    /// Normal conditioned on [lo, hi], by rejection.
    double trunc_normal(double mean, double stddev, double lo, double hi) {
        for (;;) {
            const double x = normal(mean, stddev);
            if (x >= lo && x <= hi) return x;
        }
    }

    /// Unbiased integer in [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) throw std::invalid_argument("rng: below(0)");
        const uint64_t limit = ~uint64_t{0} - ~uint64_t{0} % n;
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    std::vector<int> permutation(int n) {
        std::vector<int> p(n);
        for (int i = 0; i < n; ++i) p[i] = i;
        for (int i = n - 1; i > 0; --i) {
            const int j = static_cast<int>(below(static_cast<uint64_t>(i) + 1));
            std::swap(p[i], p[j]);
        }
        return p;
    }

    /// Independent stream derived from the current state and a stream id.
    Rng fork(uint64_t stream) {
        uint64_t x = next_u64() ^ (stream * 0x9E3779B97F4A7C15ull);
        return Rng(splitmix64(x));
    }

    template <typename S>
    void fill_normal(Tensor<S>& t, double stddev = 1.0, double mean = 0.0) {
        S* p = t.data();
        for (Index i = 0; i < t.size(); ++i) p[i] = static_cast<S>(normal(mean, stddev));
    }

    /// Normal resampled until within two standard deviations.
    template <typename S>
    void fill_trunc_normal(Tensor<S>& t, double stddev) {
        S* p = t.data();
        for (Index i = 0; i < t.size(); ++i) {
            p[i] = static_cast<S>(trunc_normal(0.0, stddev, -2.0 * stddev, 2.0 * stddev));
        }
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& s) { s_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> s_{};
};

}  // namespace jepat
