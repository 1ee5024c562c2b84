#pragma once

#include <cstddef>
#include <cstdint>

namespace tpn {

/// Purpose-separated random streams. Every consumer of randomness draws from
/// its own stream so that, e.g., changing the sampler never perturbs the
/// parameter initialization.
enum class Stream : std::uint64_t {
  kInit = 1,
  kSampling = 2,
  kNoise = 3,
  kSplit = 4,
  kEval = 5,
};

/// Counter-based generator: the n-th output is a pure function of
/// (seed, stream, substream, n). Two generators constructed with the same
/// triple produce identical sequences on every platform.
class Rng {
 public:
  Rng(std::uint64_t seed, Stream stream, std::uint64_t substream = 0);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::size_t uniform_index(std::size_t n);
  /// Standard normal via Box-Muller; no cached second value so the stream
  /// position stays a function of the number of calls.
  double normal();

  std::uint64_t counter() const noexcept { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace tpn
