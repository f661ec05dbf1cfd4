#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace alp::num {

/// SplitMix64 finalizer; a bijective 64-bit mix.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept
{
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Derives an independent stream seed from a base seed and a key path, e.g.
/// `derive_seed(run_seed, {iteration, prompt, sample})`. Streams keyed this way do not
/// depend on the order in which they are created, which is what makes parallel rollout
/// results independent of the worker count.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> keys) noexcept
{
    std::uint64_t h = mix64(base ^ 0x243F6A8885A308D3ULL);
    for (std::uint64_t k : keys) {
        h = mix64(h ^ mix64(k + 0x13198A2E03707344ULL));
    }
    return h;
}

using Rng = std::mt19937_64;

inline Rng keyed_rng(std::uint64_t base, std::initializer_list<std::uint64_t> keys)
{
    return Rng(derive_seed(base, keys));
}

/// Standard normal draws from a keyed stream.
class GaussianStream {
public:
    explicit GaussianStream(std::uint64_t seed) : rng_(seed) {}
    double operator()() { return dist_(rng_); }

private:
    Rng rng_;
    std::normal_distribution<double> dist_{0.0, 1.0};
};

} // namespace alp::num
