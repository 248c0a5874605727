#pragma once

#include <cstdint>
#include <random>

namespace dvd {

/// Seeded generator with platform-independent draws. std::mt19937_64 has a
/// standardized output sequence; the distribution transforms are defined
/// here rather than taken from <random>, whose algorithms vary by library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n) by rejection sampling.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw per pair of uniforms).
  double normal();

  /// Deterministic child seed for an independent stream.
  static std::uint64_t derive(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
};

}  // namespace dvd
