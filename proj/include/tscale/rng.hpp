#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace tscale {

// 64-bit FNV-1a, used to derive substream keys from text labels.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// Deterministic random stream addressed by (seed, label). Streams with
// distinct labels are independent of each other and of the order in which
// other streams are consumed; the same (seed, label) pair always reproduces
// the same draws bit for bit.
class RandomStream {
public:
    RandomStream() : RandomStream(0, "") {}

    RandomStream(std::uint64_t seed, std::string_view label) {
        const std::uint64_t key = fnv1a64(label);
        std::seed_seq seq{static_cast<std::uint32_t>(seed),
                          static_cast<std::uint32_t>(seed >> 32),
                          static_cast<std::uint32_t>(key),
                          static_cast<std::uint32_t>(key >> 32)};
        engine_.seed(seq);
    }

    // Uniform on [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller. Pinned here rather than delegated to
    // std::normal_distribution so streams stay stable across library versions.
    double gaussian() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        constexpr double two_pi = 6.283185307179586476925286766559;
        spare_ = r * std::sin(two_pi * u2);
        have_spare_ = true;
        return r * std::cos(two_pi * u2);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace tscale
