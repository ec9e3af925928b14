#pragma once

// Radial k-space simulation: trajectories, exact non-uniform DFT sampling, view decimation
// and complex Gaussian measurement noise.

#include <cmath>
#include <complex>
#include <numbers>
#include <string>
#include <vector>

#include "rdwi/core/errors.hpp"
#include "rdwi/core/fft.hpp"
#include "rdwi/core/parallel.hpp"
#include "rdwi/core/rng.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi {

struct KPoint {
  double kx, ky;  // cycles per FOV (grid index units)
};

/// Spokes through the k-space center. Readout sample r of a view sits at radius
/// r - readout_points/2 along the view's direction (cos angle, sin angle).
struct RadialTrajectory {
  std::size_t readout_points = 0;
  std::vector<double> angles;              // radians, one per kept view
  std::vector<std::size_t> view_indices;   // position of each view in the reference acquisition
  std::size_t reference_views = 0;

  std::size_t num_views() const noexcept { return angles.size(); }
  std::size_t num_samples() const noexcept { return angles.size() * readout_points; }

  double radius(std::size_t r) const noexcept {
    return static_cast<double>(r) - static_cast<double>(readout_points / 2);
  }

  KPoint point(std::size_t view, std::size_t r) const noexcept {
    const double rho = radius(r);
    return {rho * std::cos(angles[view]), rho * std::sin(angles[view])};
  }

  std::vector<KPoint> k_coords() const {
    std::vector<KPoint> k;
    k.reserve(num_samples());
    for (std::size_t v = 0; v < num_views(); ++v)
      for (std::size_t r = 0; r < readout_points; ++r) k.push_back(point(v, r));
    return k;
  }
};

enum class ViewScheme { uniform, block_random };

inline ViewScheme parse_view_scheme(const std::string& s) {
  if (s == "uniform") return ViewScheme::uniform;
  if (s == "block_random") return ViewScheme::block_random;
  throw ConfigError("unknown view scheme '" + s + "'");
}

inline std::string to_string(ViewScheme s) { return s == ViewScheme::uniform ? "uniform" : "block_random"; }

/// Views evenly spaced over 360 degrees: angle(v) = v * 2 pi / num_views.
inline RadialTrajectory make_trajectory(std::size_t num_views, std::size_t readout_points) {
  if (num_views < 1) throw ConfigError("trajectory needs at least one view");
  if (readout_points < 2) throw ConfigError("trajectory needs at least two readout points");
  RadialTrajectory t;
  t.readout_points = readout_points;
  t.reference_views = num_views;
  for (std::size_t v = 0; v < num_views; ++v) {
    t.angles.push_back(static_cast<double>(v) * (2.0 * std::numbers::pi / static_cast<double>(num_views)));
    t.view_indices.push_back(v);
  }
  return t;
}

struct RadialKSpace {
  std::vector<cdouble> samples;  // num_views x readout_points, view-major
  RadialTrajectory trajectory;
  std::size_t b_index = 0;

  void validate() const {
    if (samples.size() != trajectory.num_samples()) throw DataError("k-space sample count does not match trajectory");
  }
};

namespace detail {

// Per-view phase tables: table[r * n + p] = exp(sign * 2 pi i * k_r * (p - n/2) / n).
inline void view_phase_tables(const RadialTrajectory& t, std::size_t view, std::size_t n, double sign,
                              std::vector<double>& xr, std::vector<double>& xi, std::vector<double>& yr,
                              std::vector<double>& yi) {
  const std::size_t R = t.readout_points;
  xr.resize(R * n);
  xi.resize(R * n);
  yr.resize(R * n);
  yi.resize(R * n);
  const double c = std::cos(t.angles[view]), s = std::sin(t.angles[view]);
  const double scale = sign * 2.0 * std::numbers::pi / static_cast<double>(n);
  const double half = static_cast<double>(n / 2);
  for (std::size_t r = 0; r < R; ++r) {
    const double rho = t.radius(r);
    for (std::size_t p = 0; p < n; ++p) {
      const double pos = static_cast<double>(p) - half;
      const double ax = scale * rho * c * pos, ay = scale * rho * s * pos;
      xr[r * n + p] = std::cos(ax);
      xi[r * n + p] = std::sin(ax);
      yr[r * n + p] = std::cos(ay);
      yi[r * n + p] = std::sin(ay);
    }
  }
}

inline void check_square(std::size_t h, std::size_t w, const RadialTrajectory& t) {
  if (h != w) throw DataError("radial sampling needs a square image");
  if (w != t.readout_points) throw DataError("image width must equal the number of readout points");
}

}  // namespace detail

/// Exact NUDFT of an n x n complex image at the trajectory's sample locations:
///   Y(k) = sum_{y,x} img(y,x) exp(-2 pi i (kx (x - n/2) + ky (y - n/2)) / n).
inline std::vector<cdouble> nudft_forward(const std::vector<cdouble>& img, std::size_t n, const RadialTrajectory& t) {
  if (img.size() != n * n) throw DataError("image size mismatch");
  detail::check_square(n, n, t);
  const std::size_t R = t.readout_points;
  std::vector<double> re(n * n), im(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    re[i] = img[i].real();
    im[i] = img[i].imag();
  }
  std::vector<cdouble> out(t.num_samples());
  parallel_for(t.num_views(), [&](std::size_t v) {
    std::vector<double> xr, xi, yr, yi;
    detail::view_phase_tables(t, v, n, -1.0, xr, xi, yr, yi);
    for (std::size_t r = 0; r < R; ++r) {
      const double* cr = &xr[r * n];
      const double* ci = &xi[r * n];
      double acc_re = 0.0, acc_im = 0.0;
      for (std::size_t y = 0; y < n; ++y) {
        const double* pr = &re[y * n];
        const double* pi = &im[y * n];
        // Row sum: sum_x img * ex
        double sr = 0.0, si = 0.0;
        for (std::size_t x = 0; x < n; ++x) {
          sr += pr[x] * cr[x] - pi[x] * ci[x];
          si += pr[x] * ci[x] + pi[x] * cr[x];
        }
        const double er = yr[r * n + y], ei = yi[r * n + y];
        acc_re += sr * er - si * ei;
        acc_im += sr * ei + si * er;
      }
      out[v * R + r] = {acc_re, acc_im};
    }
  });
  return out;
}

/// Adjoint of nudft_forward: x(y,x) = sum_m Y_m exp(+2 pi i k_m . (r - n/2) / n).
inline std::vector<cdouble> nudft_adjoint(const std::vector<cdouble>& samples, std::size_t n, const RadialTrajectory& t) {
  if (samples.size() != t.num_samples()) throw DataError("sample count mismatch");
  detail::check_square(n, n, t);
  const std::size_t R = t.readout_points;
  std::vector<double> out_re(n * n, 0.0), out_im(n * n, 0.0);
  std::vector<double> xr, xi, yr, yi;
  for (std::size_t v = 0; v < t.num_views(); ++v) {
    detail::view_phase_tables(t, v, n, +1.0, xr, xi, yr, yi);
    // Rows are independent, so the per-pixel accumulation order (views, then readout) is fixed.
    parallel_for(n, [&](std::size_t y) {
      double* orow = &out_re[y * n];
      double* irow = &out_im[y * n];
      for (std::size_t r = 0; r < R; ++r) {
        const cdouble s = samples[v * R + r];
        const double er = yr[r * n + y], ei = yi[r * n + y];
        const double cr = s.real() * er - s.imag() * ei;
        const double ci = s.real() * ei + s.imag() * er;
        const double* tr = &xr[r * n];
        const double* ti = &xi[r * n];
        for (std::size_t x = 0; x < n; ++x) {
          orow[x] += cr * tr[x] - ci * ti[x];
          irow[x] += cr * ti[x] + ci * tr[x];
        }
      }
    });
  }
  std::vector<cdouble> out(n * n);
  for (std::size_t i = 0; i < n * n; ++i) out[i] = {out_re[i], out_im[i]};
  return out;
}

inline RadialKSpace forward_sample(const Image& image, const RadialTrajectory& traj, std::size_t b_index = 0) {
  detail::check_square(image.height(), image.width(), traj);
  for (double v : image)
    if (!std::isfinite(v)) throw DataError("image contains non-finite values");
  std::vector<cdouble> img(image.begin(), image.end());
  return RadialKSpace{nudft_forward(img, image.width(), traj), traj, b_index};
}

inline RadialKSpace forward_sample(const Array2<cdouble>& image, const RadialTrajectory& traj, std::size_t b_index = 0) {
  detail::check_square(image.height(), image.width(), traj);
  return RadialKSpace{nudft_forward(image.values(), image.width(), traj), traj, b_index};
}

/// View indices kept from a reference acquisition of `num_views` views.
///   uniform:      k * factor for k = 0 .. round(num_views / factor) - 1
///   block_random: one uniformly drawn view from each consecutive group of `factor` views
///                 (a trailing partial group included)
inline std::vector<std::size_t> select_views(std::size_t num_views, int factor, ViewScheme scheme, SeededRng& rng) {
  if (factor < 2) throw ConfigError("decimation factor must be >= 2");
  const auto f = static_cast<std::size_t>(factor);
  std::vector<std::size_t> keep;
  if (scheme == ViewScheme::uniform) {
    const auto count = static_cast<std::size_t>(std::llround(static_cast<double>(num_views) / static_cast<double>(f)));
    for (std::size_t k = 0; k < count; ++k) keep.push_back(k * f);
  } else {
    for (std::size_t start = 0; start < num_views; start += f) {
      const std::size_t len = std::min(f, num_views - start);
      keep.push_back(start + static_cast<std::size_t>(rng.below(len)));
    }
  }
  return keep;
}

/// Keeps the listed views (indices into ks's own views), in the given order.
inline RadialKSpace keep_views(const RadialKSpace& ks, const std::vector<std::size_t>& keep) {
  ks.validate();
  const std::size_t R = ks.trajectory.readout_points;
  RadialKSpace out;
  out.b_index = ks.b_index;
  out.trajectory.readout_points = R;
  out.trajectory.reference_views = ks.trajectory.reference_views;
  for (std::size_t v : keep) {
    if (v >= ks.trajectory.num_views()) throw DataError("view index out of range");
    out.trajectory.angles.push_back(ks.trajectory.angles[v]);
    out.trajectory.view_indices.push_back(ks.trajectory.view_indices[v]);
    out.samples.insert(out.samples.end(), ks.samples.begin() + static_cast<std::ptrdiff_t>(v * R),
                       ks.samples.begin() + static_cast<std::ptrdiff_t>((v + 1) * R));
  }
  return out;
}

inline RadialKSpace decimate_views(const RadialKSpace& ks, int factor, ViewScheme scheme, SeededRng& rng) {
  ks.validate();
  return keep_views(ks, select_views(ks.trajectory.num_views(), factor, scheme, rng));
}

/// Adds independent N(0, sigma^2) to the real and imaginary part of every sample.
inline RadialKSpace add_noise(const RadialKSpace& ks, double sigma, SeededRng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be >= 0");
  RadialKSpace out = ks;
  if (sigma == 0.0) return out;
  for (auto& s : out.samples) {
    const double nr = rng.normal();
    const double ni = rng.normal();
    s += cdouble(sigma * nr, sigma * ni);
  }
  return out;
}

/// Zero/first-order phase correction of acquired views. Simulated data has no phase error,
/// so this is the identity; scanner data would estimate and remove per-view phase here.
inline RadialKSpace phase_correct(const RadialKSpace& ks) { return ks; }

}  // namespace rdwi
