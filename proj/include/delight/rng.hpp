#pragma once

/**
 * @file rng.hpp
 * @brief Seeded random streams. One root seed is split into named substreams
 *        so that adding draws in one subsystem never perturbs another.
 */

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace delight {

namespace detail {

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace detail

/// mt19937_64-backed stream with a draw counter. The normal sampler is
/// hand-rolled Box-Muller so the byte stream does not depend on the standard
/// library's unspecified distribution algorithms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  /// Derive the substream `name` of a root seed.
  static Rng substream(uint64_t root_seed, std::string_view name) {
    return Rng(detail::splitmix64(root_seed ^ detail::fnv1a64(name)));
  }

  uint64_t next_u64() {
    ++draws_;
    return engine_();
  }

  /// Uniform in [0,1) with 53 bits of mantissa.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, unbiased.
  uint64_t uniform_int(uint64_t n) {
    if (n == 0) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t r;
    do {
      r = next_u64();
    } while (r >= limit);
    return r % n;
  }

  bool bernoulli(double p = 0.5) { return uniform() < p; }

  /// Standard normal via Box-Muller; the second value is cached.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Number of raw engine draws so far; strictly increases with use.
  uint64_t position() const { return draws_; }

 private:
  std::mt19937_64 engine_;
  uint64_t draws_ = 0;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

}  // namespace delight
