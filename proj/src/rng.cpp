#include "flexkd/rng.hpp"

#include <cmath>
#include <numbers>

namespace flexkd {

namespace {

std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

RngState::RngState(std::uint64_t seed) : engine_(seed), seed_(seed) {}

std::uint64_t RngState::next_u64() { return engine_(); }

std::uint64_t RngState::next_below(std::uint64_t bound) {
  if (bound == 0) {
    throw ValueError("next_below: bound must be positive");
  }
  // Rejection sampling kills the modulo bias.
  const std::uint64_t threshold = (0 - bound) % bound;
  for (;;) {
    const std::uint64_t r = next_u64();
    if (r >= threshold) return r % bound;
  }
}

double RngState::uniform01() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngState::normal() {
  const double u1 = 1.0 - uniform01();  // (0, 1]
  const double u2 = uniform01();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::vector<std::int64_t> RngState::permutation(std::int64_t n) {
  if (n < 0) {
    throw ValueError("permutation: n must be non-negative");
  }
  std::vector<std::int64_t> p(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  for (std::int64_t i = n - 1; i > 0; --i) {
    const std::uint64_t j = next_below(static_cast<std::uint64_t>(i) + 1);
    std::swap(p[static_cast<std::size_t>(i)], p[static_cast<std::size_t>(j)]);
  }
  return p;
}

std::uint64_t RngState::mix(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t state = seed;
  std::uint64_t out = splitmix64(state);
  state ^= stream * 0xD2B74407B1CE6E93ULL + 0x9E3779B97F4A7C15ULL;
  out ^= splitmix64(state);
  return out;
}

Tensor rand_normal(RngState& rng, std::vector<std::int64_t> shape, double mean, double stddev) {
  if (stddev < 0.0) {
    throw ValueError("rand_normal: stddev must be non-negative, got " + std::to_string(stddev));
  }
  if (stddev == 0.0) {
    return Tensor::full(std::move(shape), mean);
  }
  Tensor t(std::move(shape));
  double* d = t.data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    d[i] = mean + stddev * rng.normal();
  }
  return t;
}

Tensor rand_uniform(RngState& rng, std::vector<std::int64_t> shape, double lo, double hi) {
  if (!(lo <= hi)) {
    throw ValueError("rand_uniform: requires lo <= hi");
  }
  Tensor t(std::move(shape));
  double* d = t.data();
  for (std::int64_t i = 0; i < t.size(); ++i) {
    d[i] = lo + (hi - lo) * rng.uniform01();
  }
  return t;
}

}  // namespace flexkd
