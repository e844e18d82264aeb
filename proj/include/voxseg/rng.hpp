#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>
#include <utility>

namespace voxseg {

/// Deterministic random source.
///
/// Draws go through hand-rolled mappings on top of mt19937_64 rather than
/// <random> distributions, whose output is implementation-defined; results
/// are therefore reproducible across standard libraries for a fixed seed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform integer in [lo, hi], inclusive. Rejection sampling, unbiased.
  int uniform_int(int lo, int hi) {
    const std::uint64_t range = static_cast<std::uint64_t>(hi) - lo + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return lo + static_cast<int>(x % range);
  }

  /// Uniform double in [lo, hi).
  double uniform_real(double lo = 0.0, double hi = 1.0) {
    const double u = static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    return lo + u * (hi - lo);
  }

  /// Standard normal via Box-Muller; the spare value is cached.
  double normal(double mean = 0.0, double sd = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + sd * spare_;
    }
    double u1, u2;
    do {
      u1 = uniform_real();
    } while (u1 <= 0.0);
    u2 = uniform_real();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return mean + sd * r * std::cos(a);
  }

  bool bernoulli(double p) { return uniform_real() < p; }

  /// Fisher-Yates shuffle.
  template <typename RandomIt>
  void shuffle(RandomIt first, RandomIt last) {
    const auto n = last - first;
    for (auto i = n - 1; i > 0; --i) {
      const int j = uniform_int(0, static_cast<int>(i));
      std::swap(first[i], first[j]);
    }
  }

  /// Derives an independent stream id from a seed and a string tag (FNV-1a).
  /// Used to give cases, folds and stages their own deterministic streams.
  static std::uint64_t mix(std::uint64_t seed, std::string_view tag) {
    std::uint64_t h = 14695981039346656037ull ^ seed;
    for (const char c : tag) {
      h ^= static_cast<unsigned char>(c);
      h *= 1099511628211ull;
    }
    // splitmix64 finalizer to decorrelate nearby seeds
    h += 0x9e3779b97f4a7c15ull;
    h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
    h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
    return h ^ (h >> 31);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace voxseg
