#pragma once
// Deterministic random number generation with derivable child streams.
//
// Streams are self-contained (xoshiro256** state, seeded via splitmix64) so
// results are identical across platforms and standard libraries. A child
// stream depends only on the parent's construction seed, never on how much
// of the parent has been consumed; that makes per-example streams stable
// under batch reordering and under checkpoint/resume.

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <vector>

namespace mango {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

class Rng {
 public:
  Rng() : Rng(0) {}
  explicit Rng(uint64_t seed) : seed_(seed) {
    uint64_t x = seed;
    for (auto& s : state_) {
      x = splitmix64(x);
      s = x;
    }
  }

  uint64_t seed() const { return seed_; }

  // Stream derived from this stream's seed and a salt; independent of
  // consumption state.
  Rng child(uint64_t salt) const {
    return Rng(splitmix64(splitmix64(seed_) ^ splitmix64(salt ^ 0xd1b54a32d192ed03ull)));
  }

  uint64_t next_u64() {
    const uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  // (0, 1]
  double uniform_open() {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  }

  // Box-Muller; consumes exactly two uniforms per call, no cached state.
  double normal() {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  bool bernoulli(double p) { return uniform() < p; }

  int binomial(int n, double p) {
    int count = 0;
    for (int i = 0; i < n; ++i) count += bernoulli(p) ? 1 : 0;
    return count;
  }

  // Uniform in [0, n); multiply-shift bounded draw.
  uint64_t below(uint64_t n) {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return lo + static_cast<int>(below(static_cast<uint64_t>(hi - lo) + 1));
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  std::array<uint64_t, 5> save_state() const {
    return {seed_, state_[0], state_[1], state_[2], state_[3]};
  }
  void load_state(const std::array<uint64_t, 5>& s) {
    seed_ = s[0];
    state_ = {s[1], s[2], s[3], s[4]};
  }

 private:
  static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

  uint64_t seed_;
  std::array<uint64_t, 4> state_{};
};

}  // namespace mango
