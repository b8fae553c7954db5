#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace isp {

// FNV-1a, used for stream derivation and registry/config fingerprints.
inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64_u64(uint64_t v, uint64_t h) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xff;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// Deterministic xoshiro256++ generator. All randomness in the project flows
// through this type so results do not depend on the standard library's
// distribution implementations.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64(sm);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t next_below(uint64_t n) {
        return static_cast<uint64_t>((static_cast<__uint128_t>(next_u64()) * n) >> 64);
    }

    // Standard normal via Box-Muller; consumes two uniforms per call so the
    // generator state is the only state.
    double normal() {
        double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586477 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t state_[4];
};

// Named derived stream: one root seed fans out into independent streams so
// sequential and per-worker execution draw the same numbers.
inline uint64_t derive_seed(uint64_t root, std::string_view stream_name) {
    uint64_t h = fnv1a64(stream_name);
    uint64_t s = root ^ h;
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t root, std::string_view stream_name, uint64_t a) {
    uint64_t h = fnv1a64_u64(a, fnv1a64(stream_name));
    uint64_t s = root ^ h;
    return splitmix64(s);
}

inline uint64_t derive_seed(uint64_t root, std::string_view stream_name, uint64_t a, uint64_t b) {
    uint64_t h = fnv1a64_u64(b, fnv1a64_u64(a, fnv1a64(stream_name)));
    uint64_t s = root ^ h;
    return splitmix64(s);
}

}  // namespace isp
