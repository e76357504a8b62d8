#pragma once

#include <cstdint>
#include <vector>

namespace crowdfuse {

/// SplitMix64 generator with hand-rolled distributions.
///
/// Every draw is specified down to the bit, so datasets, initial weights and
/// audit subsets are identical across compilers and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of mantissa.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, bound) by rejection; bound must be > 0.
  std::uint64_t below(std::uint64_t bound);
  /// Standard normal via Box-Muller (one value per call, no caching).
  double normal();
  /// Normal resampled until it lies within [-2, 2] standard deviations.
  double truncated_normal(double stddev);
  bool bernoulli(double p) { return uniform() < p; }

  /// Derive an independent stream, e.g. one per sample or per layer.
  Rng fork(std::uint64_t salt) const;

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
};

/// First k elements of a seeded Fisher-Yates shuffle of 0..n-1.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k,
                                                    Rng& rng);

}  // namespace crowdfuse
