#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <vector>

namespace versreid {

// xoshiro256** with a splitmix64 seeder. The generator is fully portable:
// the same seed yields the same stream on every platform, which is what the
// reproducibility guarantees of the pipeline rest on. State is exactly 32
// bytes, matching the checkpoint layout.
class Rng {
 public:
  Rng() : Rng(0u) {}

  explicit Rng(std::uint64_t seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[1] * 5u, 7) * 9u;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t uniform_index(std::uint64_t n) {
    // Rejection sampling to avoid modulo bias.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n + 1) % n;
    std::uint64_t v = next_u64();
    while (v > limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller (no cached spare, keeps state minimal).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform_index(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives an independent stream; used to decouple e.g. batch sampling from
  // parameter initialization so toggling one does not shift the other.
  Rng fork(std::uint64_t tag) {
    std::uint64_t x = next_u64() ^ (tag * 0x9e3779b97f4a7c15ull);
    Rng child(0);
    for (auto& word : child.state_) word = splitmix64(x);
    return child;
  }

  std::array<std::uint8_t, 32> serialize() const {
    std::array<std::uint8_t, 32> bytes{};
    for (int i = 0; i < 4; ++i) {
      std::uint64_t w = state_[i];
      for (int b = 0; b < 8; ++b) {
        bytes[static_cast<std::size_t>(i * 8 + b)] = static_cast<std::uint8_t>(w & 0xffu);
        w >>= 8;
      }
    }
    return bytes;
  }

  static Rng deserialize(const std::array<std::uint8_t, 32>& bytes) {
    Rng rng(0);
    for (int i = 0; i < 4; ++i) {
      std::uint64_t w = 0;
      for (int b = 7; b >= 0; --b) {
        w = (w << 8) | bytes[static_cast<std::size_t>(i * 8 + b)];
      }
      rng.state_[i] = w;
    }
    return rng;
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  std::array<std::uint64_t, 4> state_{};
};

}  // namespace versreid
