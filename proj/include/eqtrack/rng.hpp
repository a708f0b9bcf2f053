#pragma once

#include <cmath>
#include <cstdint>
#include <random>

namespace eqtrack::rng {

// splitmix64, used to mix key words into an engine seed
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t combine(std::uint64_t h, std::uint64_t w) {
  return mix64(h ^ (w + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2)));
}

// Deterministic random stream addressed by a key tuple. Distinct keys give
// independent-looking streams; the same key always replays the same sequence
// on every platform (mt19937_64 is bit-exact, and the distributions below are
// implemented here instead of relying on implementation-defined std ones).
class Stream {
 public:
  explicit Stream(std::uint64_t k0, std::uint64_t k1 = 0, std::uint64_t k2 = 0,
                  std::uint64_t k3 = 0) {
    std::uint64_t h = mix64(k0);
    h = combine(h, k1);
    h = combine(h, k2);
    h = combine(h, k3);
    eng_.seed(h);
  }

  std::uint64_t raw() { return eng_(); }

  // uniform in [0,1)
  double canonical() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * canonical(); }

  // uniform integer in [0, n)
  std::uint64_t below(std::uint64_t n) {
    // multiply-shift; bias is negligible for the n used here (< 2^32)
    unsigned __int128 m = static_cast<unsigned __int128>(eng_()) * n;
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = canonical(), u2 = canonical();
    while (u1 <= 0.0) u1 = canonical();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return mean + stddev * r * std::cos(a);
  }

  // exponential inter-arrival counting; exact for any mean
  long poisson(double mean) {
    if (mean <= 0.0) return 0;
    double acc = 0.0;
    long k = -1;
    while (acc <= mean) {
      double u = canonical();
      while (u <= 0.0) u = canonical();
      acc += -std::log(u);
      ++k;
    }
    return k;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace eqtrack::rng
