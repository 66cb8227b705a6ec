#pragma once

#include <array>
#include <cstdint>

namespace probanet {

/// SplitMix64 step (Steele, Lea, Flood). Used for seeding and for hashing
/// (seed, stream, index) tuples into independent sub-seeds.
///   z += 0x9e3779b97f4a7c15
///   z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9
///   z = (z ^ (z >> 27)) * 0x94d049bb133111eb
///   return z ^ (z >> 31)
std::uint64_t splitmix64(std::uint64_t& state) noexcept;

/// Derives a sub-seed from a base seed and two stream coordinates.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) noexcept;

/// xoshiro256** 1.0 (Blackman & Vigna), state filled from SplitMix64(seed).
///   result = rotl(s1 * 5, 7) * 9
///   t = s1 << 17; s2 ^= s0; s3 ^= s1; s1 ^= s2; s0 ^= s3; s2 ^= t; s3 = rotl(s3, 45)
/// All derived draws below are defined in terms of next_u64 only, so a
/// reimplementation in any language reproduces the same sequences.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) noexcept;

    std::uint64_t next_u64() noexcept;

    /// Uniform on [0, 1): top 53 bits of next_u64 times 2^-53.
    double uniform() noexcept;
    /// Uniform on [lo, hi).
    double uniform(double lo, double hi) noexcept;
    /// Uniform integer on [0, n) by rejection on the top bits; n > 0.
    std::uint64_t below(std::uint64_t n) noexcept;
    /// Uniform integer on [lo, hi] inclusive.
    std::int64_t range(std::int64_t lo, std::int64_t hi) noexcept;

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return ~result_type{0}; }
    result_type operator()() noexcept { return next_u64(); }

    friend bool operator==(const Rng&, const Rng&) = default;

private:
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace probanet
