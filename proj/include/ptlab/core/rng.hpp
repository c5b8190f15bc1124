#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace ptlab {

/// Combines two 64-bit values into a well-mixed seed (splitmix64 finalizer).
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

/// Deterministic random source.
///
/// Wraps std::mt19937_64, whose output sequence is fixed by the standard. The
/// derived distributions are implemented here rather than taken from <random>
/// because the standard leaves their algorithms to the implementation, and
/// batches must be bit-identical across platforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n);

  /// Uniform integer in [lo, hi] inclusive.
  std::int64_t between(std::int64_t lo, std::int64_t hi);

  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = below(i);
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

/// Stateless uniform draw in [0, 1) keyed by (seed, stream, index).
double hashed_uniform(std::uint64_t seed, std::uint64_t stream, std::uint64_t index);

}  // namespace ptlab
