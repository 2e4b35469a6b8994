#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "flexkd/tensor.hpp"

namespace flexkd {

/// Seeded pseudo-random stream with a platform-independent draw sequence.
///
/// The raw 64-bit engine output is the standard-specified mt19937_64 sequence;
/// the float conversions and the normal transform are implemented here because
/// the standard library's distributions are not bit-portable across
/// implementations. Each normal draw consumes exactly two uniforms.
class RngState {
 public:
  explicit RngState(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64();
  /// Unbiased draw in [0, bound); bound must be positive.
  std::uint64_t next_below(std::uint64_t bound);
  /// Uniform in [0, 1) with 53 random bits.
  double uniform01();
  /// Standard normal via the Box-Muller cosine branch.
  double normal();

  /// Seeded Fisher-Yates permutation of [0, n).
  std::vector<std::int64_t> permutation(std::int64_t n);

  /// Derives a decorrelated seed for an independent stream (splitmix64 steps).
  static std::uint64_t mix(std::uint64_t seed, std::uint64_t stream);

 private:
  std::mt19937_64 engine_;
  std::uint64_t seed_ = 0;
};

/// Independent normal draws; stddev = 0 gives a constant tensor without
/// consuming any draws. Negative stddev throws ValueError.
Tensor rand_normal(RngState& rng, std::vector<std::int64_t> shape, double mean, double stddev);

/// Independent uniform draws in [lo, hi); requires lo <= hi.
Tensor rand_uniform(RngState& rng, std::vector<std::int64_t> shape, double lo, double hi);

}  // namespace flexkd
