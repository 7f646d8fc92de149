#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace tsrq {

// Seeded RNG wrapper. All draws are built from raw mt19937_64 output so the
// stream does not depend on standard-library distribution internals; the same
// seed yields the same values on any platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller, one spare cached
  double normal();

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n);

  template <typename T>
  void shuffle(std::vector<T>& xs) {
    for (int64_t i = static_cast<int64_t>(xs.size()) - 1; i > 0; --i) {
      std::swap(xs[i], xs[uniform_int(i + 1)]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace tsrq
