#pragma once

#include <cmath>
#include <cstdint>

namespace redec {

// Deterministic 64-bit shift-register generator (xorshift64*). All sampling in
// this project goes through this struct so datasets, initializations and
// dropout masks reproduce bit-exactly across platforms; the C++ standard
// distributions are implementation-defined and are deliberately not used.
struct Rng {
    uint64_t state;

    explicit Rng(uint64_t seed = 0x9e3779b97f4a7c15ull) : state(seed ? seed : 1) {}

    uint64_t next_u64() {
        uint64_t x = state;
        x ^= x >> 12;
        x ^= x << 25;
        x ^= x >> 27;
        state = x;
        return x * 0x2545f4914f6cdd1dull;
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    bool coin() { return (next_u64() & 1ull) != 0; }

    // Standard normal via Box-Muller (one value per call; no cached spare so
    // the stream position is a pure function of the call count).
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(T& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }
};

// splitmix64 finalizer; used to derive independent streams from
// (master seed, index) pairs so parallel and serial generation agree.
inline uint64_t mix_seed(uint64_t a) {
    a += 0x9e3779b97f4a7c15ull;
    a = (a ^ (a >> 30)) * 0xbf58476d1ce4e5b9ull;
    a = (a ^ (a >> 27)) * 0x94d049bb133111ebull;
    return a ^ (a >> 31);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) { return mix_seed(a + 0x632be59bd9b4e019ull * mix_seed(b)); }

inline uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c) { return mix_seed(mix_seed(a, b), c); }

}  // namespace redec
