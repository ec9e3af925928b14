#pragma once

// Thin RAII wrapper over FFTW for 2-D complex transforms.

#include <fftw3.h>

#include <complex>
#include <cstddef>
#include <mutex>
#include <vector>

namespace rdwi {

using cdouble = std::complex<double>;

namespace detail {
// FFTW planning is not thread-safe; execution of distinct plans is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// In-place 2-D DFT of a row-major rows x cols array. Unnormalized in both directions:
/// forward uses exp(-2 pi i ...), inverse uses exp(+2 pi i ...).
class Fft2 {
 public:
  Fft2(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), buf_(rows * cols) {
    std::lock_guard lock(detail::fftw_planner_mutex());
    // FFTW_UNALIGNED keeps the codelet choice independent of where the caller's data lives.
    auto* p = reinterpret_cast<fftw_complex*>(buf_.data());
    const unsigned flags = FFTW_ESTIMATE | FFTW_UNALIGNED;
    fwd_ = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), p, p, FFTW_FORWARD, flags);
    inv_ = fftw_plan_dft_2d(static_cast<int>(rows), static_cast<int>(cols), p, p, FFTW_BACKWARD, flags);
  }
  ~Fft2() {
    std::lock_guard lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(inv_);
  }
  Fft2(const Fft2&) = delete;
  Fft2& operator=(const Fft2&) = delete;

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  void forward(std::vector<cdouble>& data) const { run(fwd_, data); }
  void inverse(std::vector<cdouble>& data) const { run(inv_, data); }

 private:
  void run(fftw_plan plan, std::vector<cdouble>& data) const {
    auto* p = reinterpret_cast<fftw_complex*>(data.data());
    fftw_execute_dft(plan, p, p);
  }

  std::size_t rows_, cols_;
  std::vector<cdouble> buf_;
  fftw_plan fwd_ = nullptr;
  fftw_plan inv_ = nullptr;
};

/// Swaps quadrants so that index 0 moves to the center (numpy fftshift for even sizes).
inline void fftshift2(std::vector<cdouble>& a, std::size_t rows, std::size_t cols) {
  std::vector<cdouble> out(a.size());
  for (std::size_t y = 0; y < rows; ++y)
    for (std::size_t x = 0; x < cols; ++x) out[((y + rows / 2) % rows) * cols + (x + cols / 2) % cols] = a[y * cols + x];
  a.swap(out);
}

}  // namespace rdwi
