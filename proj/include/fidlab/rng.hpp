#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace fidlab {

// Keyed random streams. Every random draw in the project is a pure function
// of (global seed, scope string, two integer coordinates), so resampling a
// context at (seed, question, step) is reproducible regardless of iteration
// order or thread scheduling. Hand-rolled mixing/sampling is used instead of
// std distributions because their outputs are implementation-defined.

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

inline uint64_t mix_key(uint64_t seed, std::string_view scope, uint64_t a = 0, uint64_t b = 0) {
    uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ull);
    h = splitmix64(h ^ fnv1a64(scope));
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    return h;
}

inline std::mt19937_64 make_stream(uint64_t seed, std::string_view scope, uint64_t a = 0, uint64_t b = 0) {
    return std::mt19937_64(mix_key(seed, scope, a, b));
}

// Unbiased-enough uniform index in [0, n); n must be > 0.
inline size_t uniform_index(std::mt19937_64& rng, size_t n) {
    return static_cast<size_t>(rng() % n);
}

inline double uniform_real(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Standard normal via Box-Muller (deterministic across platforms).
inline double normal(std::mt19937_64& rng) {
    double u1 = uniform_real(rng);
    double u2 = uniform_real(rng);
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

// First k picks of a partial Fisher-Yates over [0, n). Has the prefix
// property: for a fixed stream, the first k draws do not depend on how many
// more are requested, mirroring the independent relevant/irrelevant sampling
// convention of the evaluation protocol.
inline std::vector<size_t> sample_without_replacement(std::mt19937_64& rng, size_t n, size_t k) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    std::vector<size_t> out;
    out.reserve(k);
    for (size_t i = 0; i < k && i < n; ++i) {
        size_t j = i + uniform_index(rng, n - i);
        std::swap(idx[i], idx[j]);
        out.push_back(idx[i]);
    }
    return out;
}

}  // namespace fidlab
