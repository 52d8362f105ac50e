#include "saevit/rng.hpp"

#include <cmath>

#include "saevit/errors.hpp"

namespace saevit {

double RngState::uniform() {
  // 53 random bits -> [0,1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::int64_t RngState::uniform_int(std::int64_t n) {
  if (n <= 0) throw InputError("uniform_int needs positive n");
  const std::uint64_t un = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  std::uint64_t v;
  do {
    v = next_u64();
  } while (v >= limit);
  return static_cast<std::int64_t>(v % un);
}

double RngState::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double mag = std::sqrt(-2.0 * std::log(u1));
  const double two_pi = 6.283185307179586476925286766559;
  spare_ = mag * std::sin(two_pi * u2);
  has_spare_ = true;
  return mag * std::cos(two_pi * u2);
}

double RngState::truncated_normal(double bound) {
  for (;;) {
    const double z = normal();
    if (z >= -bound && z <= bound) return z;
  }
}

RngState RngState::split(std::uint64_t label) const {
  // Derive a child seed by running the mix on (seed, label); children with
  // distinct labels are independent streams of the same family.
  RngState mixer(seed_ ^ (0x9e3779b97f4a7c15ULL + label * 0xff51afd7ed558ccdULL));
  const std::uint64_t child_seed = mixer.next_u64();
  return RngState(child_seed);
}

}  // namespace saevit
