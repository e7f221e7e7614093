// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace baseroute {

/// SplitMix64 finalizer. Stateless 64-bit mixing function.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Deterministic random stream backed by SplitMix64. The generator and every
/// derived draw (uniform, bounded int, shuffle order) are fully specified
/// here, so identical seeds reproduce identical streams on any platform.
/// Not for cryptographic use.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  /// Uniform on [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, bound). Rejection sampling, no modulo bias.
  std::uint64_t next_below(std::uint64_t bound) {
    std::uint64_t x, r;
    do {
      x = next_u64();
      r = x % bound;
    } while (x - r > std::uint64_t(0) - bound);
    return r;
  }

  /// Standard normal via Box-Muller; one sample per call, the sine branch
  /// is discarded so the stream advances by exactly two raw draws.
  double normal() {
    double u1 = 1.0 - next_double();  // (0, 1]
    double u2 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  /// Fisher-Yates, descending index order: swap(a[i], a[j]), j in [0, i].
  template <typename T>
  void shuffle(std::vector<T>& a) {
    for (std::size_t i = a.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(a[i - 1], a[j]);
    }
  }

 private:
  std::uint64_t state_;
};

/// Named sub-stream ids. All randomness in the project flows from one master
/// seed through derive_rng(master, stream, index).
namespace streams {
inline constexpr std::uint64_t kInit = 1;     // parameter initialization
inline constexpr std::uint64_t kShuffle = 2;  // routing shuffle, index = worker id
inline constexpr std::uint64_t kBatch = 3;    // synthetic batches, index = step*workers + worker
inline constexpr std::uint64_t kEval = 4;     // evaluation sets
inline constexpr std::uint64_t kRoute = 5;    // per-step routing master seeds
}  // namespace streams

/// seed' = mix64(master ^ mix64(stream ^ mix64(index))). Documented so that
/// independent reimplementations can reproduce any sub-stream.
inline Rng derive_rng(std::uint64_t master, std::uint64_t stream, std::uint64_t index = 0) {
  return Rng(mix64(master ^ mix64(stream ^ mix64(index))));
}

/// Seed value (not an Rng) for handing a whole derived stream to a component.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return mix64(master ^ mix64(stream ^ mix64(index)));
}

}  // namespace baseroute
