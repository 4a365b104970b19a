#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <vector>

namespace stp {

// 64-bit FNV-1a, used for seed derivation and config digests.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic RNG: mt19937_64 engine (bit-stable per the standard) with
// hand-rolled distributions, since std:: distributions are implementation
// defined and would break run-to-run reproducibility across toolchains.
//
// Streams are derived statelessly from (seed, tags...): the training loop
// never threads one mutating stream through time, so resuming at step k
// regenerates exactly the randomness of steps k, k+1, ...
class Rng {
 public:
  explicit Rng(uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

  uint64_t seed() const { return seed_; }

  Rng derive(std::initializer_list<uint64_t> tags) const {
    uint64_t h = seed_;
    for (uint64_t t : tags) h = splitmix64(h ^ splitmix64(t));
    return Rng(h);
  }

  uint64_t next_u64() { return engine_(); }

  // Unbiased draw in [0, bound) via rejection.
  uint64_t uniform_u64(uint64_t bound) {
    const uint64_t max = std::numeric_limits<uint64_t>::max();
    const uint64_t limit = max - max % bound;
    uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % bound;
  }

  int uniform_int(int bound) { return static_cast<int>(uniform_u64(static_cast<uint64_t>(bound))); }

  // [0, 1) with 53 random bits.
  double uniform_real() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_real(); }

  // Box-Muller with cached spare.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform_real();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform_real();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = uniform_u64(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // First k entries of a random permutation of {0..n-1}.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> perm(n);
    for (int i = 0; i < n; ++i) perm[i] = i;
    for (int i = 0; i < k; ++i) {
      const int j = i + uniform_int(n - i);
      std::swap(perm[i], perm[j]);
    }
    perm.resize(k);
    return perm;
  }

 private:
  uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace stp
