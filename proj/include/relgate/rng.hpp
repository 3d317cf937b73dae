#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace relgate {

// Deterministic counter-free PRNG (xoshiro256++ seeded via splitmix64).
// Unlike std::normal_distribution, the normal sampler below is pinned to a
// fixed algorithm so streams are bit-identical across standard libraries.
class RngState {
  public:
    explicit RngState(std::uint64_t seed) : seed_(seed) {
        std::uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() noexcept {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform01() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t next_below(std::uint64_t n) noexcept {
        // Rejection sampling keeps the distribution exact for any n.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; the cosine branch only, so one draw
    // consumes exactly two uniforms.
    double normal() noexcept {
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        return r * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

    // Normal(0, std^2) truncated at +-clip_sigmas standard deviations.
    double truncated_normal(double std_dev, double clip_sigmas = 2.0) noexcept {
        double z = normal();
        while (std::abs(z) > clip_sigmas) z = normal();
        return z * std_dev;
    }

    // Derive an independent labeled substream from this state's seed.
    // Used to expand one root seed per purpose (init / data / shuffle).
    RngState fork(std::string_view label) const noexcept {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        std::uint64_t mix = seed_;
        return RngState(h ^ splitmix64_once(mix) ^ (seed_ << 1));
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) noexcept {
        return (x << k) | (x >> (64 - k));
    }

    static std::uint64_t splitmix64(std::uint64_t& x) noexcept {
        x += 0x9e3779b97f4a7c15ull;
        std::uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    static std::uint64_t splitmix64_once(std::uint64_t x) noexcept {
        return splitmix64(x);
    }

    std::uint64_t seed_ = 0;
    std::uint64_t state_[4] = {};
};

}  // namespace relgate
