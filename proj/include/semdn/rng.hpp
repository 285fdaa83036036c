#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "semdn/tensor.hpp"

namespace semdn {

// Explicit RNG stream. All stochastic code in the library takes one of these
// as an argument; there is no hidden global state. Gaussian samples come from
// a cache-free Box-Muller transform so the draw sequence is a pure function
// of the seed and the call order.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * (1.0 / 9007199254740992.0);
    }

    // uniform in [lo,hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // standard normal via Box-Muller (no cached second sample)
    double normal() {
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw ValueError("uniform_int: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t v = gen_();
        while (v >= limit) v = gen_();
        return v % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
};

namespace detail {
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}
}  // namespace detail

// Deterministic seed derivation: child streams are named by a tag plus an
// index so independent parts of a run never share a stream.
inline uint64_t derive_seed(uint64_t base, std::string_view tag, uint64_t index = 0) {
    uint64_t h = 0xcbf29ce484222325ULL ^ base;
    for (char c : tag) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
        h *= 0x100000001b3ULL;
    }
    h ^= index + 0x9e3779b97f4a7c15ULL;
    return detail::splitmix64(h);
}

inline Tensor randn(Rng& rng, std::vector<int> shape, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

}  // namespace semdn
