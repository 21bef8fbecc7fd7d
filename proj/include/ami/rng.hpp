#pragma once

#include <cstdint>
#include <random>
#include <string>

namespace ami {

/// Seeded 64-bit Mersenne Twister with distribution code written out here so
/// streams are bit-reproducible across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller; consumes two draws per call.
  double normal();

  /// Unbiased integer in [0, n).
  std::size_t index(std::size_t n);

  /// Independent stream derived from this generator's seed material.
  static std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
};

}  // namespace ami
