#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "poisonlab/errors.hpp"

namespace poisonlab {

// Counter-based random numbers. Every draw is a pure function of
// (seed, stream, counter), so results do not depend on how work is split
// across batches or on how many draws other streams made. Reruns with the
// same seed reproduce bit-identically on any platform.
//
// The mixer is the splitmix64 finalizer, applied to the three words chained
// together. It passes the statistical bar for everything done here (noise
// init, shuffles, subset picks); no cryptographic strength is implied.

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  // Streams are labeled with up to two words (e.g. a purpose tag and an
  // example index) so independent parts of an algorithm never share draws.
  Rng(std::uint64_t seed, std::uint64_t stream_a = 0, std::uint64_t stream_b = 0)
      : key_(mix64(mix64(mix64(seed) ^ stream_a) ^ stream_b)) {}

  std::uint64_t next_u64() { return mix64(key_ ^ counter_++); }

  // Uniform in [0,1) with 53 random bits; identical everywhere, unlike
  // std::uniform_real_distribution which is implementation-defined.
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; one value per call, pairs not cached so
  // the draw count stays predictable.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;  // log(0) guard
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform integer in [0, n) by rejection, so every value is exactly
  // equally likely regardless of n.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) fail(ErrorKind::usage, "Rng::below needs n > 0");
    std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    for (;;) {
      std::uint64_t v = next_u64();
      if (v < limit) return v % n;
    }
  }

  template <class Vec>
  void shuffle(Vec& v) {
    // Fisher-Yates, back to front.
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// First k elements of a shuffled copy of pool; used for subset selection.
inline std::vector<int> sample_without_replacement(std::vector<int> pool,
                                                   std::size_t k, Rng& rng) {
  if (k > pool.size())
    fail(ErrorKind::budget, "sample of " + std::to_string(k) +
                                " from pool of " + std::to_string(pool.size()));
  rng.shuffle(pool);
  pool.resize(k);
  return pool;
}

}  // namespace poisonlab
