#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace geofuse {

/// Deterministic random source. Every draw maps to a fixed number of engine
/// events so replays and per-stream bookkeeping stay exact across platforms.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    /// Independent stream derived from a root seed and a key path, e.g.
    /// Rng::keyed(seed, {kMaskStream, step, sample}). Streams with different
    /// keys are decorrelated, so adding draws to one never shifts another.
    static Rng keyed(uint64_t root, std::initializer_list<uint64_t> parts);

    uint64_t next_u64() { return engine_(); }

    /// One engine event; uniform on [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// Unbiased integer in [0, n). Rejection sampling, variable event count.
    int below(int n);

    /// Standard normal, Box-Muller; two events per pair, spare cached.
    double normal();
    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// splitmix64 finalizer, also used to fold key parts into stream seeds.
uint64_t mix64(uint64_t x);

// Stream tags for Rng::keyed key paths.
inline constexpr uint64_t kInitStream = 0x11;
inline constexpr uint64_t kDataStream = 0x22;
inline constexpr uint64_t kBatchStream = 0x33;
inline constexpr uint64_t kMaskStream = 0x44;

}  // namespace geofuse
