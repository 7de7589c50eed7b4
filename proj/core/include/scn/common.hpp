#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

namespace scn {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct SizeError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct DatasetError : Error { using Error::Error; };
struct TrainError : Error { using Error::Error; };

/// Exact rational scale factor in (0,1), kept reduced.
struct Ratio {
  int num = 1;
  int den = 2;

  Ratio() = default;
  Ratio(int n, int d);

  /// Accepts "a/b" or a decimal string like "0.75".
  static Ratio parse(const std::string& text);

  double value() const { return static_cast<double>(num) / den; }

  /// True when 1/ratio is an integer (the strided/avgpool requirement).
  bool integer_stride() const { return num == 1; }
  int stride() const;

  /// Next pyramid size: max(1, round(size * ratio)), ties away from zero.
  int scale_down(int size) const;

  std::string str() const;
  bool operator==(const Ratio&) const = default;
};

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull + b;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

/// Seeded generator with portable output transforms. Distribution draws are
/// implemented here rather than with std::*_distribution so that a given seed
/// produces the same stream on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t next_u64() { return gen_(); }

  /// Uniform in [0,1) with 53 random bits.
  double unit() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * unit(); }

  /// Standard normal via Box-Muller (one value per pair of uniforms).
  double normal() {
    double u1 = 1.0 - unit();  // (0,1], keeps the log finite
    double u2 = unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925287 * u2);
  }

  /// Uniform integer in [0, n). Lemire reduction, no rejection loop.
  std::uint32_t bounded(std::uint32_t n) {
    std::uint64_t x = gen_() >> 32;
    return static_cast<std::uint32_t>((x * n) >> 32);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace scn
