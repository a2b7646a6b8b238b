#pragma once

#include <cmath>
#include <cstdint>

namespace optnan {

// Counter-based splittable generator. Every stream is (key, counter); a
// draw hashes the pair with the splitmix64 finalizer, so streams can be
// split without sharing state and results depend only on the root seed
// and the split path.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ULL)) {}

  // Derive an independent child stream. Children with distinct ids are
  // decorrelated from each other and from the parent.
  Rng split(std::uint64_t stream_id) const {
    Rng child(0);
    child.key_ = mix(key_ + 0x632be59bd9b4e019ULL * (stream_id + 1));
    return child;
  }

  std::uint64_t next_u64() { return mix(key_ + 0xd1b54a32d192ed03ULL * ++ctr_); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; caches the second value.
  double normal() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

 private:
  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t key_;
  std::uint64_t ctr_ = 0;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace optnan
