#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace phieat {

// SplitMix64 stream keyed by hashing a seed with a list of stream tags.
// Same key gives the same sequence on every platform, which is what the
// determinism contracts (manifest hashes, resume equivalence) lean on.
// Derived streams make sampling a pure function of (seed, purpose, indices),
// so parallel producers never contend for generator state.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  static Rng stream(uint64_t seed, std::initializer_list<uint64_t> tags) {
    uint64_t h = mix(seed + 0x9e3779b97f4a7c15ULL);
    for (uint64_t t : tags) h = mix(h ^ (t + 0x9e3779b97f4a7c15ULL));
    return Rng(h);
  }

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix(state_);
  }

  // [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n), n > 0.
  uint64_t below(uint64_t n) {
    const uint64_t threshold = -n % n;  // 2^64 mod n
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  double normal() {
    // Box-Muller without a cached spare: two draws per variate keeps the
    // stream position independent of call history.
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // First k positions of a seeded permutation of [0, n): partial Fisher-Yates.
  std::vector<int> sample_without_replacement(int n, int k) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    for (int i = 0; i < k; ++i) {
      int j = i + int(below(uint64_t(n - i)));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(k);
    return idx;
  }

  void shuffle(std::vector<int>& v) {
    for (int i = int(v.size()) - 1; i > 0; --i) {
      int j = int(below(uint64_t(i + 1)));
      std::swap(v[i], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }
  uint64_t state_;
};

}  // namespace phieat
