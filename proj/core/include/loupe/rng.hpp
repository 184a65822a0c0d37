#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace loupe {

/// Seeded generator with platform-independent derived distributions.
///
/// std::uniform_real_distribution and friends are implementation-defined, so
/// every derived quantity here is computed directly from the raw 64-bit
/// mt19937_64 stream, which the standard pins bit-for-bit.
class Rng {
public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform in the open interval (0, 1).
  double uniform_open() {
    double u = 0.0;
    while (u == 0.0) u = uniform();
    return u;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  /// Standard normal (Box-Muller, one value per call).
  double normal();

  /// Uniformly random permutation of 0..n-1 (Fisher-Yates).
  std::vector<std::size_t> permutation(std::size_t n);

  /// Derives an independent child seed; used to split one user seed into
  /// streams for data, masks, initialization and noise.
  std::uint64_t fork() { return engine_() ^ 0x9E3779B97F4A7C15ULL; }

private:
  std::mt19937_64 engine_;
};

} // namespace loupe
