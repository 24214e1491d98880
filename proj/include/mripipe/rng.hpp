#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "mripipe/common.hpp"

namespace mripipe {

inline uint64_t splitmix64(uint64_t& state) {
  uint64_t z = (state += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

/// xoshiro256++ seeded via splitmix64. Hand-rolled draws (not <random>
/// distributions) so sequences are byte-identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : origin_(seed) {
    uint64_t sm = seed;
    for (auto& w : state_) w = splitmix64(sm);
  }

  uint64_t next() {
    const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Unbiased integer in [0, n) via rejection.
  uint64_t below(uint64_t n) {
    if (n == 0) fail_validation("Rng::below requires n > 0");
    const uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (no cached spare, so draws stay aligned).
  double normal() {
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  /// Independent stream derived from the constructor seed; order of forks does
  /// not matter, only the tag.
  Rng fork(uint64_t tag) const {
    uint64_t sm = origin_ ^ (0x9E3779B97F4A7C15ull * (tag + 0x632BE59BD9B4E019ull));
    return Rng(splitmix64(sm));
  }

  Rng fork(const std::string& tag) const { return fork(fnv1a64(tag)); }

  uint64_t origin() const { return origin_; }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t origin_;
  uint64_t state_[4];
};

}  // namespace mripipe
