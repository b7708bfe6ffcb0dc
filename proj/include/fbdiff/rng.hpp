#pragma once

#include <cmath>
#include <cstdint>

namespace fbdiff {

/// Deterministic splitmix64 stream. One instance per logical consumer; the
/// same seed always produces the same draw sequence.
class Rng {
 public:
  static constexpr uint64_t kGamma = 0x9E3779B97F4A7C15ULL;

  explicit Rng(uint64_t seed) : state_(seed) {}

  /// Derives the stream for case `index` under `master_seed` by jumping the
  /// splitmix64 state, so parallel and serial dataset generation agree.
  static Rng for_case(uint64_t master_seed, uint64_t index) {
    return Rng(master_seed + (index + 1) * kGamma);
  }

  uint64_t next_u64() {
    state_ += kGamma;
    uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0,1) with 53 random bits.
  double next_uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_uniform(); }

  uint64_t next_below(uint64_t bound) { return next_u64() % bound; }

  /// Standard normal via Box-Muller on two consecutive 53-bit uniforms.
  double next_gaussian() {
    double u1 = next_uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    const double u2 = next_uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t state_;
};

}  // namespace fbdiff
