#pragma once

// Shared helpers for the unit tests: seeded random data and finite-difference checks.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <unistd.h>

#include "rdwi/core/rng.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi::test {

inline Image random_image(SeededRng& rng, std::size_t h, std::size_t w, double lo = 0.0, double hi = 1.0) {
  Image im(h, w);
  for (double& v : im) v = rng.uniform(lo, hi);
  return im;
}

inline Mask random_mask(SeededRng& rng, std::size_t h, std::size_t w, double p = 0.7) {
  Mask m(h, w);
  for (auto& v : m) v = rng.uniform() < p ? 1 : 0;
  return m;
}

inline std::vector<double> random_vector(SeededRng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("rdwi_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

/// Largest relative error between an analytic gradient and central differences of f, with the
/// error scaled by max(|analytic|, |numeric|, floor).
inline double max_fd_error(std::vector<double>& x, const std::function<double()>& f, const std::vector<double>& analytic,
                           double h = 1e-6, double floor = 1e-3) {
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double fp = f();
    x[i] = keep - h;
    const double fm = f();
    x[i] = keep;
    const double num = (fp - fm) / (2.0 * h);
    const double scale = std::max({std::abs(num), std::abs(analytic[i]), floor});
    worst = std::max(worst, std::abs(num - analytic[i]) / scale);
  }
  return worst;
}

}  // namespace rdwi::test
