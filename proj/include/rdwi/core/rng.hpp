#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace rdwi {

/**
 * Counter-based pseudo random generator.
 *
 * Draw i (1-based) of a generator with key K is splitmix64_mix(K + i * 0x9E3779B97F4A7C15).
 * The key is splitmix64_mix(seed ^ splitmix64_mix(stream + 0xD1B54A32D192ED03)), so a
 * (seed, stream) pair fully determines the sequence. Only 64-bit integer arithmetic is used
 * for the raw stream, which makes it identical on every platform. Uniform doubles take the
 * top 53 bits; normals use the Box-Muller transform on two uniforms (the second value of
 * each pair is cached).
 */
class SeededRng {
 public:
  static constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

  explicit SeededRng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream), key_(mix(seed ^ mix(stream + 0xD1B54A32D192ED03ULL))) {}

  static constexpr std::uint64_t mix(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  std::uint64_t next_u64() noexcept { return mix(key_ + (++counter_) * kGolden); }

  /// Uniform in [0, 1).
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n), unbiased (rejection on the top of the range).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
      v = next_u64();
    } while (v >= limit);
    return v % n;
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double t = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(t);
    has_spare_ = true;
    return r * std::cos(t);
  }

  /// Independent generator for a sub-task; does not advance this one.
  SeededRng fork(std::uint64_t stream) const noexcept {
    return SeededRng(mix(seed_ ^ mix(stream_ + 0x632BE59BD9B4E019ULL)), stream);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream() const noexcept { return stream_; }
  std::uint64_t draws() const noexcept { return counter_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace rdwi
