#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace tpt {

/// Counter-based 64-bit generator: the i-th output is a SplitMix64 finalizer
/// applied to key + (i+1)*gamma. Streams are derived by hashing a label into
/// the key, so any (seed, label, index) tuple names a reproducible stream
/// independent of what else has been drawn.
class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit CounterRng(std::uint64_t seed) : key_(mix(seed ^ 0x6a09e667f3bcc909ULL)) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() {
    ++counter_;
    return mix(key_ + counter_ * 0x9e3779b97f4a7c15ULL);
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  CounterRng split(std::uint64_t stream) const { return CounterRng(key_, mix(stream + 0x3c6ef372fe94f82bULL)); }
  CounterRng split(std::string_view label) const { return split(fnv1a(label)); }

  std::uint64_t counter() const { return counter_; }

  static constexpr std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  }

 private:
  CounterRng(std::uint64_t parent_key, std::uint64_t salt) : key_(mix(parent_key ^ salt)) {}

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

inline std::uint64_t CounterRng::below(std::uint64_t n) {
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = max() - max() % n;
  for (;;) {
    const std::uint64_t x = (*this)();
    if (x < limit) return x % n;
  }
}

}  // namespace tpt
