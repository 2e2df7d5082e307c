#pragma once
// Deterministic, serializable random number generator (xoshiro256** seeded
// via splitmix64). Every stochastic choice in the library flows through this
// so that runs can be reproduced bit-for-bit and resumed mid-stream.

#include <array>
#include <cmath>
#include <cstdint>

#include "uvi/common.hpp"

namespace uvi {

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64(x);
    has_cached_normal_ = false;
    cached_normal_ = 0.0;
  }

  std::uint64_t next_u64() {
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

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the second value of each pair is cached.
  double normal() {
    if (has_cached_normal_) {
      has_cached_normal_ = false;
      return cached_normal_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_normal_ = r * std::sin(a);
    has_cached_normal_ = true;
    return r * std::cos(a);
  }

  // State words plus the Box-Muller cache; enough to resume the stream exactly.
  struct Snapshot {
    std::array<std::uint64_t, 4> state{};
    std::uint8_t has_cached_normal = 0;
    std::uint64_t cached_normal_bits = 0;
  };

  Snapshot snapshot() const {
    Snapshot s;
    s.state = state_;
    s.has_cached_normal = has_cached_normal_ ? 1 : 0;
    double v = cached_normal_;
    static_assert(sizeof(v) == sizeof(std::uint64_t));
    std::memcpy(&s.cached_normal_bits, &v, sizeof(v));
    return s;
  }

  void restore(const Snapshot& s) {
    state_ = s.state;
    has_cached_normal_ = s.has_cached_normal != 0;
    std::memcpy(&cached_normal_, &s.cached_normal_bits, sizeof(cached_normal_));
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::array<std::uint64_t, 4> state_{};
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace uvi
