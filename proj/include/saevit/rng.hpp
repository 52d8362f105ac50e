#pragma once

#include <cstdint>

namespace saevit {

/// Splittable counter-style generator (splitmix64 core). Fixed seed gives a
/// fixed stream regardless of platform, which is what parameter init and
/// channel sampling rely on for reproducibility.
class RngState {
 public:
  explicit RngState(std::uint64_t seed) : state_(seed), seed_(seed) {}

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double uniform();

  /// Uniform integer in [0, n). n must be positive.
  std::int64_t uniform_int(std::int64_t n);

  /// Standard normal via Box-Muller (deterministic, no libm distribution).
  double normal();

  /// Standard normal conditioned on |z| <= bound (rejection sampling).
  double truncated_normal(double bound = 2.0);

  /// Independent child stream; same (seed, label) always gives the same child.
  RngState split(std::uint64_t label) const;

 private:
  std::uint64_t state_;
  std::uint64_t seed_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace saevit
