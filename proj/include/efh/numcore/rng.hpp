#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace efh {

/// Counter-based generator: the n-th draw of stream s under seed k is
/// mix(k, s, n), so any draw is reproducible without replaying the others.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed = 0, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
  }

  /// FNV-1a, used to derive a stream id from a parameter name.
  static std::uint64_t hash(std::string_view text) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    for (unsigned char c : text) {
      h ^= c;
      h *= 0x100000001B3ull;
    }
    return h;
  }

  std::uint64_t next_u64() {
    return mix(mix(seed_ ^ mix(stream_)) + counter_++);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t counter() const { return counter_; }

  /// Independent child stream; the parent counter is not advanced.
  CounterRng fork(std::uint64_t sub) const {
    return CounterRng(mix(seed_ ^ mix(stream_ + 0x51ED27ull)), sub);
  }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace efh
