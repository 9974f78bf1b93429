#pragma once

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <random>
#include <vector>

namespace fedseg {

// Deterministic random source. mt19937_64 is fully specified by the
// standard; the distribution transforms live here because the standard
// library's are implementation-defined and would break bitwise
// reproducibility across toolchains.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // [0, 1)
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // inclusive bounds, rejection sampling (no modulo bias)
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const std::uint64_t range = static_cast<std::uint64_t>(hi - lo) + 1;
        const std::uint64_t limit =
            std::numeric_limits<std::uint64_t>::max() -
            std::numeric_limits<std::uint64_t>::max() % range;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return lo + static_cast<std::int64_t>(x % range);
    }

    // standard normal via Box-Muller, one spare cached
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates
    std::vector<std::int64_t> permutation(std::int64_t n) {
        std::vector<std::int64_t> p(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
        for (std::int64_t i = n - 1; i > 0; --i)
            std::swap(p[static_cast<std::size_t>(i)],
                      p[static_cast<std::size_t>(uniform_int(0, i))]);
        return p;
    }

    // splitmix64 finalizer
    static std::uint64_t mix(std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Independent stream keyed by (seed, path...). Used to give every
    // client/round/purpose its own stream so results do not depend on
    // scheduling order.
    static std::uint64_t derive(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
        std::uint64_t h = mix(seed);
        for (std::uint64_t p : path) h = mix(h ^ p);
        return h;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// stream tags for Rng::derive; arbitrary fixed constants
namespace rng_tag {
inline constexpr std::uint64_t kContent = 0x10;
inline constexpr std::uint64_t kNoise = 0x11;
inline constexpr std::uint64_t kDataset = 0x12;
inline constexpr std::uint64_t kNetInit = 0x20;
inline constexpr std::uint64_t kFederation = 0x21;
inline constexpr std::uint64_t kClient = 0x22;
inline constexpr std::uint64_t kExtractor = 0x30;
inline constexpr std::uint64_t kDamInit = 0x31;
inline constexpr std::uint64_t kDamTrain = 0x32;
inline constexpr std::uint64_t kSubset = 0x40;
}  // namespace rng_tag

}  // namespace fedseg
