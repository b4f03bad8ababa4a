#pragma once

#include <cstdint>
#include <string_view>

namespace c2f {

/// Counter-based random stream.
///
/// The i-th raw draw (i = 1, 2, ...) is `mix64(seed + i * 0x9E3779B97F4A7C15)`
/// where `mix64` is the SplitMix64 finalizer:
///
///     z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
///     z = (z ^ (z >> 27)) * 0x94D049BB133111EB
///     z =  z ^ (z >> 31)
///
/// `uniform()` maps a raw draw to `(raw >> 11) * 2^-53`, i.e. [0, 1).
/// `normal()` is Box-Muller on two consecutive uniforms u1, u2:
/// `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; the sine branch is discarded so the
/// stream position after each call is always +2.
/// Substreams are `RandomStream(mix64(seed ^ mix64(tag)))`.
class RandomStream {
 public:
  explicit RandomStream(std::uint64_t seed = 0) : seed_(seed) {}

  static std::uint64_t mix64(std::uint64_t z);
  static std::uint64_t hash_tag(std::string_view tag);

  std::uint64_t next_u64();
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  double normal();
  /// Knuth's multiplication method; adequate for the small rates used here.
  int poisson(double rate);
  bool bernoulli(double p) { return uniform() < p; }

  RandomStream derive(std::uint64_t tag) const;
  RandomStream derive(std::string_view tag) const { return derive(hash_tag(tag)); }
  RandomStream derive(std::string_view tag, std::uint64_t index) const {
    return derive(tag).derive(index);
  }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

}  // namespace c2f
