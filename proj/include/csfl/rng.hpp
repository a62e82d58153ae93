// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace csfl {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

// Deterministic 64-bit stream (splitmix64). std::mt19937 plus the standard
// distributions are implementation-defined, which would break the
// bit-identical-across-platforms contract, so draws are generated explicitly.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // Uniform in [0, 1) with 53 random mantissa bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n). Lemire multiply-shift, no modulo bias.
    std::uint64_t uniform_int(std::uint64_t n) {
        const unsigned __int128 product =
            static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
        return static_cast<std::uint64_t>(product >> 64);
    }

    // Standard normal via Box-Muller; draws exactly two uniforms per call so
    // the stream position never depends on a cached spare.
    double normal() {
        const double u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log1p(-u1));
        return r * std::cos(2.0 * std::numbers::pi * u2);
    }

    // Independent substream for a named purpose. Folding the salt through the
    // finalizer keeps sibling streams uncorrelated.
    [[nodiscard]] Rng derive(std::uint64_t salt) const {
        std::uint64_t s = state_ ^ (0x6a09e667f3bcc909ULL + salt * 0x9e3779b97f4a7c15ULL);
        detail::splitmix64(s);
        return Rng(s);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::uint64_t state() const { return state_; }

    friend bool operator==(const Rng& a, const Rng& b) { return a.state_ == b.state_; }

private:
    std::uint64_t state_;
};

}  // namespace csfl
