#ifndef HVP_RNG_HPP
#define HVP_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

namespace hvp {

// Deterministic helpers on top of mt19937_64. std::*_distribution is
// implementation-defined, so sampling goes through these instead.

inline double rng_unit(std::mt19937_64& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;  // [0,1)
}

inline double rng_range(std::mt19937_64& g, double lo, double hi) {
  return lo + (hi - lo) * rng_unit(g);
}

inline uint64_t rng_below(std::mt19937_64& g, uint64_t n) {
  if (n == 0) return 0;
  uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = g();
  } while (x >= limit);
  return x % n;
}

inline int rng_int(std::mt19937_64& g, int lo, int hi) {  // inclusive bounds
  return lo + static_cast<int>(rng_below(g, static_cast<uint64_t>(hi - lo + 1)));
}

inline double rng_normal(std::mt19937_64& g) {
  double u1 = 1.0 - rng_unit(g);  // (0,1]
  double u2 = rng_unit(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

inline uint64_t mix_seed(uint64_t a, uint64_t b) {
  uint64_t z = a + 0x9e3779b97f4a7c15ull + (b << 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

template <typename T>
void rng_shuffle(std::mt19937_64& g, std::vector<T>& v) {
  for (size_t i = v.size(); i > 1; --i) {
    size_t j = static_cast<size_t>(rng_below(g, i));
    std::swap(v[i - 1], v[j]);
  }
}

}  // namespace hvp

#endif
