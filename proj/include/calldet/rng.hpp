#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace calldet {

// Seeded RNG with hand-rolled distributions. mt19937_64 output is fixed by
// the standard, and sampling below avoids std:: distributions (whose
// algorithms are implementation-defined), so identical seeds give identical
// streams on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // standard normal via Box-Muller (no cached spare, one fresh pair per call)
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Knuth's method; fine for the small rates used here
  int poisson(double mean) {
    if (mean <= 0.0) return 0;
    const double limit = std::exp(-mean);
    double prod = uniform();
    int n = 0;
    while (prod > limit) {
      ++n;
      prod *= uniform();
    }
    return n;
  }

  int uniform_int(int lo, int hi_inclusive) {
    const int span = hi_inclusive - lo + 1;
    return lo + static_cast<int>(uniform() * span) % span;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(uniform() * i);
      std::swap(v[i - 1], v[j < i ? j : i - 1]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Stable per-file sub-seed so parallel generation cannot change content.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace calldet
