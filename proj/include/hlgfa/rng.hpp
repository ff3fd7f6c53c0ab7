#pragma once

#include <cstdint>

namespace hlgfa {

/// SplitMix64 (Steele, Lea, Flood 2014). Used only to expand seeds.
class SplitMix64 {
public:
    explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

private:
    std::uint64_t state_;
};

/// Seed for an independent stream, e.g. (global seed, sample index) or
/// (epoch seed, sample index). Pure function of its inputs.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
    SplitMix64 mix(base ^ (0xD1B54A32D192ED03ULL * (index + 1)));
    mix.next();
    return mix.next();
}

/// xorshift64* (Vigna 2016): shifts 12/25/27, output multiplier
/// 0x2545F4914F6CDD1D. The 64-bit state is the first SplitMix64 output of
/// the seed (remapped away from zero), so every seed is valid and the
/// stream is identical on every platform.
///
/// Draw conventions, relied on by replay tests:
///   uniform()          one draw, top 53 bits scaled to [0, 1)
///   uniform(lo, hi)    lo + (hi - lo) * uniform()
///   uniform_int(a, b)  a + floor(uniform() * (b - a + 1)), clamped to b
///   bernoulli(p)       uniform() < p
class Xorshift64Star {
public:
    explicit Xorshift64Star(std::uint64_t seed) {
        SplitMix64 mix(seed);
        state_ = mix.next();
        if (state_ == 0) state_ = 0x9E3779B97F4A7C15ULL;
    }

    std::uint64_t next_u64() {
        state_ ^= state_ >> 12;
        state_ ^= state_ << 25;
        state_ ^= state_ >> 27;
        return state_ * 0x2545F4914F6CDD1DULL;
    }

    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        const double span = static_cast<double>(hi - lo + 1);
        auto offset = static_cast<std::int64_t>(uniform() * span);
        const std::int64_t value = lo + offset;
        return value > hi ? hi : value;
    }

    bool bernoulli(double p) { return uniform() < p; }

    std::uint64_t state() const { return state_; }

private:
    std::uint64_t state_;
};

}  // namespace hlgfa
