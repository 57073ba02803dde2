#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>

namespace camkit {

// Every random draw in the library comes from this file so that ports to
// other languages can reproduce streams exactly:
//
//   * seeding: splitmix64 (Steele, Lea, Flood) expands a 64-bit seed into the
//     four 64-bit words of xoshiro256** state;
//   * stream: xoshiro256** 1.0 (Blackman, Vigna);
//   * uniform double in [0,1): top 53 bits of next() times 2^-53;
//   * bounded integer in [0,n): rejection on next() below (2^64 - n) mod n,
//     then next() mod n;
//   * normal: one Box-Muller cosine branch per call, u1 = 1 - uniform(),
//     u2 = uniform(), z = sqrt(-2 ln u1) * cos(2 pi u2). The sine branch is
//     discarded.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Combines a base seed with stream tags (epoch, item index, layer, ...) into
/// an independent seed: state = seed; for each tag: state = splitmix64(state ^ tag).
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t state = seed;
  for (std::uint64_t tag : tags) {
    std::uint64_t s = state ^ tag;
    state = splitmix64(s);
  }
  return state;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) {
    std::uint64_t sm = seed;
    for (auto& word : state_) word = splitmix64(sm);
  }

  std::uint64_t next() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  std::uint64_t below(std::uint64_t n) noexcept {
    const std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      const std::uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  double normal() noexcept {
    const double u1 = 1.0 - uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) noexcept { return uniform() < p; }

  /// Fisher-Yates from the back: for i = n-1..1 swap(i, below(i+1)).
  template <class T>
  void shuffle(std::span<T> items) noexcept {
    for (std::size_t i = items.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::array<std::uint64_t, 4> state_{};
};

}  // namespace camkit
