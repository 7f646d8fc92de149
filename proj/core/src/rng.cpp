#include "tsrq/rng.hpp"

#include <cmath>

#include "tsrq/errors.hpp"

namespace tsrq {

double Rng::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = uniform();
  double u2 = uniform();
  while (u1 <= 1e-300) u1 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int64_t Rng::uniform_int(int64_t n) {
  if (n <= 0) throw ArgumentError("uniform_int: n must be positive");
  // rejection sampling to avoid modulo bias
  const uint64_t un = static_cast<uint64_t>(n);
  const uint64_t limit = UINT64_MAX - UINT64_MAX % un;
  uint64_t x = next_u64();
  while (x >= limit) x = next_u64();
  return static_cast<int64_t>(x % un);
}

}  // namespace tsrq
