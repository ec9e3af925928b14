#pragma once

// Image reconstruction from radial k-space: Kaiser-Bessel gridding with ramp density
// compensation and deapodization, and a TV-regularized iterative baseline.

#include <algorithm>
#include <cmath>
#include <complex>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "rdwi/core/config.hpp"
#include "rdwi/core/errors.hpp"
#include "rdwi/core/fft.hpp"
#include "rdwi/core/parallel.hpp"
#include "rdwi/core/types.hpp"
#include "rdwi/kspace.hpp"

namespace rdwi {

/// Modified Bessel function of the first kind, order zero, by its power series
/// sum_k ((x/2)^k / k!)^2. Terms are added until they fall below 1e-17 of the sum.
inline double bessel_i0(double x) {
  const double q = 0.25 * x * x;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k < 500; ++k) {
    term *= q / (static_cast<double>(k) * static_cast<double>(k));
    sum += term;
    if (term < 1e-17 * sum) break;
  }
  return sum;
}

/// Kaiser-Bessel gridding kernel, peak-normalized to 1 at u = 0, zero outside |u| <= width/2.
inline double kb_kernel(double u, double width, double beta) {
  const double t = 2.0 * u / width;
  if (std::abs(t) > 1.0) return 0.0;
  return bessel_i0(beta * std::sqrt(std::max(0.0, 1.0 - t * t))) / bessel_i0(beta);
}

/// Continuous Fourier transform of kb_kernel at frequency nu (cycles per grid cell):
/// width * sinh(sqrt(beta^2 - (pi width nu)^2)) / sqrt(...) / I0(beta), with sin() past the root.
inline double kb_transform(double nu, double width, double beta) {
  const double a = std::numbers::pi * width * nu;
  const double arg = beta * beta - a * a;
  double shape;
  if (arg > 1e-12) {
    const double r = std::sqrt(arg);
    shape = std::sinh(r) / r;
  } else if (arg < -1e-12) {
    const double r = std::sqrt(-arg);
    shape = std::sin(r) / r;
  } else {
    shape = 1.0;
  }
  return width * shape / bessel_i0(beta);
}

struct GriddingParams {
  double kernel_width = 4.0;
  double kernel_beta = default_kernel_beta(4.0);
  Grid2D grid{};

  static GriddingParams for_size(std::size_t n, double width = 4.0) {
    return {width, default_kernel_beta(width), Grid2D{n, n, 32.0}};
  }

  void validate() const {
    grid.validate();
    if (!(kernel_width >= 2.0)) throw ConfigError("kernel width must be >= 2");
    if (!(kernel_beta > 0.0)) throw ConfigError("kernel beta must be > 0");
  }
};

/// Ramp weights before normalization: |radius|, with the DC sample at 1/4 of the weight of the
/// first nonzero radius.
inline std::vector<double> ramp_weights(const RadialTrajectory& t) {
  double first_nonzero = 0.0;
  for (std::size_t r = 0; r < t.readout_points; ++r) {
    const double rho = std::abs(t.radius(r));
    if (rho > 0.0 && (first_nonzero == 0.0 || rho < first_nonzero)) first_nonzero = rho;
  }
  std::vector<double> w(t.num_samples());
  for (std::size_t v = 0; v < t.num_views(); ++v)
    for (std::size_t r = 0; r < t.readout_points; ++r) {
      const double rho = std::abs(t.radius(r));
      w[v * t.readout_points + r] = rho > 0.0 ? rho : first_nonzero / 4.0;
    }
  return w;
}

/// Pixels within radius_fraction * n/2 of the image center.
inline Mask interior_mask(std::size_t n, double radius_fraction = 0.75) {
  Mask m(n, n, 0);
  const double c = static_cast<double>(n / 2), r = radius_fraction * static_cast<double>(n) / 2.0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const double dy = static_cast<double>(y) - c, dx = static_cast<double>(x) - c;
      m(y, x) = dx * dx + dy * dy <= r * r ? 1 : 0;
    }
  return m;
}

namespace detail {

inline void check_gridding(const RadialTrajectory& t, const GriddingParams& p) {
  p.validate();
  if (p.grid.height != p.grid.width) throw DataError("gridding needs a square grid");
  if (t.readout_points != p.grid.width) throw DataError("trajectory readout points do not match the grid");
}

/// Separable deapodization divisor on the image grid. Throws when it approaches zero.
inline std::vector<double> deapodization(const GriddingParams& p) {
  const std::size_t n = p.grid.width;
  std::vector<double> c1(n);
  for (std::size_t x = 0; x < n; ++x)
    c1[x] = kb_transform((static_cast<double>(x) - static_cast<double>(n / 2)) / static_cast<double>(n), p.kernel_width,
                         p.kernel_beta);
  std::vector<double> d(n * n);
  double dmax = 0.0;
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      d[y * n + x] = c1[y] * c1[x];
      dmax = std::max(dmax, std::abs(d[y * n + x]));
    }
  for (double v : d)
    if (std::abs(v) < 1e-8 * dmax) throw NumericalError("deapodization divisor below 1e-8 of its maximum");
  return d;
}

/// Convolution gridding of weighted samples, inverse DFT, deapodization.
inline std::vector<cdouble> grid_points(const std::vector<KPoint>& k, const std::vector<cdouble>& values,
                                        const std::vector<double>& weights, const GriddingParams& p) {
  const std::size_t n = p.grid.width;
  const auto ni = static_cast<long>(n);
  const long c = ni / 2;
  const double half = p.kernel_width / 2.0;
  std::vector<cdouble> g(n * n, 0.0);
  std::vector<double> wx, wy;
  std::vector<long> ix, iy;
  for (std::size_t m = 0; m < k.size(); ++m) {
    const cdouble val = values[m] * weights[m];
    if (val == 0.0) continue;
    wx.clear();
    wy.clear();
    ix.clear();
    iy.clear();
    for (long gx = static_cast<long>(std::ceil(k[m].kx - half)); gx <= static_cast<long>(std::floor(k[m].kx + half)); ++gx) {
      wx.push_back(kb_kernel(static_cast<double>(gx) - k[m].kx, p.kernel_width, p.kernel_beta));
      ix.push_back(((gx + c) % ni + ni) % ni);
    }
    for (long gy = static_cast<long>(std::ceil(k[m].ky - half)); gy <= static_cast<long>(std::floor(k[m].ky + half)); ++gy) {
      wy.push_back(kb_kernel(static_cast<double>(gy) - k[m].ky, p.kernel_width, p.kernel_beta));
      iy.push_back(((gy + c) % ni + ni) % ni);
    }
    for (std::size_t a = 0; a < iy.size(); ++a) {
      const cdouble row = val * wy[a];
      cdouble* grow = &g[static_cast<std::size_t>(iy[a]) * n];
      for (std::size_t b = 0; b < ix.size(); ++b) grow[ix[b]] += row * wx[b];
    }
  }
  // Centered inverse DFT: img(r) = sum_k G(k) exp(+2 pi i k (r - n/2) / n).
  fftshift2(g, n, n);
  Fft2 fft(n, n);
  fft.inverse(g);
  fftshift2(g, n, n);
  const auto deapod = deapodization(p);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] /= deapod[i];
  return g;
}

/// Centered DFT of a constant-one n x n image, one axis: sum_p exp(-2 pi i k (p - n/2) / n).
inline cdouble dirichlet(double k, std::size_t n) {
  cdouble s = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    const double a = -2.0 * std::numbers::pi * k * (static_cast<double>(p) - static_cast<double>(n / 2)) / static_cast<double>(n);
    s += cdouble(std::cos(a), std::sin(a));
  }
  return s;
}

}  // namespace detail

/// Constant-valued disk of radius 0.45 n centered on the grid: the reference object for
/// density-weight calibration. Its support covers interior_mask(n) with a margin.
inline Image constant_disk(std::size_t n, double value = 1.0) {
  Image im(n, n, 0.0);
  const auto m = interior_mask(n, 0.9);
  for (std::size_t i = 0; i < im.size(); ++i) im[i] = m[i] ? value : 0.0;
  return im;
}

namespace detail {

struct CalibrationKey {
  std::size_t views, readout;
  double width, beta;
  friend bool operator==(const CalibrationKey&, const CalibrationKey&) = default;
};

inline std::vector<double> area_weights(const RadialTrajectory& t, std::size_t n) {
  auto w = ramp_weights(t);
  const double nn = static_cast<double>(n);
  const double area = std::numbers::pi / (static_cast<double>(t.num_views()) * nn * nn);
  for (double& v : w) v *= area;
  return w;
}

// Scale that makes the uniform trajectory with the same view count reproduce constant_disk(n)
// on average over interior_mask(n). Independent of which views a decimated trajectory kept.
inline double calibration_scale(const RadialTrajectory& t, const GriddingParams& p) {
  static std::mutex mutex;
  static std::vector<std::pair<CalibrationKey, double>> cache;
  const CalibrationKey key{t.num_views(), t.readout_points, p.kernel_width, p.kernel_beta};
  {
    std::lock_guard lock(mutex);
    for (const auto& [k, v] : cache)
      if (k == key) return v;
  }
  const std::size_t n = p.grid.width;
  const auto ref = make_trajectory(t.num_views(), t.readout_points);
  const auto disk = constant_disk(n);
  const std::vector<cdouble> img(disk.begin(), disk.end());
  const auto rec = grid_points(ref.k_coords(), nudft_forward(img, n, ref), area_weights(ref, n), p);
  const auto interior = interior_mask(n);
  double sum = 0.0;
  std::size_t cnt = 0;
  for (std::size_t i = 0; i < rec.size(); ++i)
    if (interior[i]) {
      sum += rec[i].real();
      ++cnt;
    }
  const double scale = static_cast<double>(cnt) / sum;
  std::lock_guard lock(mutex);
  cache.emplace_back(key, scale);
  return scale;
}

}  // namespace detail

/// Density compensation. Ramp weights are put in area units, pi / (V n^2) per unit radius
/// (2V half-spokes tile the disk; n^2 undoes the unnormalized inverse DFT), then rescaled so
/// that gridding the exact k-space of constant_disk(n) on the uniform V-view trajectory returns
/// the constant on average over interior_mask(n).
inline std::vector<double> density_weights(const RadialTrajectory& t, const GriddingParams& p) {
  detail::check_gridding(t, p);
  auto w = detail::area_weights(t, p.grid.width);
  const double scale = detail::calibration_scale(t, p);
  for (double& v : w) v *= scale;
  return w;
}

inline std::vector<double> density_weights(const RadialTrajectory& t) {
  return density_weights(t, GriddingParams::for_size(t.readout_points));
}

/// Complex gridding reconstruction (linear in the k-space data).
inline Array2<cdouble> grid_reconstruct_complex(const RadialKSpace& ks, const GriddingParams& p) {
  ks.validate();
  detail::check_gridding(ks.trajectory, p);
  const auto w = density_weights(ks.trajectory, p);
  const auto img = detail::grid_points(ks.trajectory.k_coords(), ks.samples, w, p);
  Array2<cdouble> out(p.grid.height, p.grid.width);
  std::copy(img.begin(), img.end(), out.begin());
  return out;
}

/// density weighting -> KB convolution gridding -> inverse FFT -> deapodization -> magnitude.
inline Image grid_reconstruct(const RadialKSpace& ks, const GriddingParams& p) {
  const auto c = grid_reconstruct_complex(ks, p);
  Image out(c.height(), c.width());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(c[i]);
  return out;
}

// ---------------------------------------------------------------------------------------------
// Iterative TV-regularized reconstruction.

struct CsParams {
  int iterations = 50;
  double step = 1.0;       // in units of 1 / ||A^H A||
  double tv_weight = 0.01;  // image-intensity units

  void validate() const {
    if (iterations < 1) throw ConfigError("CS iterations must be >= 1");
    if (!(step > 0.0)) throw ConfigError("CS step must be > 0");
    if (!(tv_weight >= 0.0)) throw ConfigError("CS tv_weight must be >= 0");
  }
};

/// A^H A for the NUDFT A of a trajectory, applied exactly through a 2n x 2n circulant
/// embedding of its Toeplitz kernel T(d) = sum_m exp(2 pi i k_m . d / n).
class ToeplitzNormal {
 public:
  ToeplitzNormal(const RadialTrajectory& t, std::size_t n) : n_(n), fft_(2 * n, 2 * n) {
    detail::check_square(n, n, t);
    const std::size_t m2 = 2 * n;
    const std::size_t R = t.readout_points;
    std::vector<double> tre(m2 * m2, 0.0), tim(m2 * m2, 0.0);
    std::vector<double> exr(R * m2), exi(R * m2), eyr(R * m2), eyi(R * m2);
    const double scale = 2.0 * std::numbers::pi / static_cast<double>(n);
    for (std::size_t v = 0; v < t.num_views(); ++v) {
      const double c = std::cos(t.angles[v]), s = std::sin(t.angles[v]);
      for (std::size_t r = 0; r < R; ++r) {
        const double rho = t.radius(r);
        // Offsets d in [-n, n) are stored at circular index d mod 2n.
        for (std::size_t i = 0; i < m2; ++i) {
          const double d = static_cast<double>(i < n ? static_cast<long>(i) : static_cast<long>(i) - static_cast<long>(m2));
          exr[r * m2 + i] = std::cos(scale * rho * c * d);
          exi[r * m2 + i] = std::sin(scale * rho * c * d);
          eyr[r * m2 + i] = std::cos(scale * rho * s * d);
          eyi[r * m2 + i] = std::sin(scale * rho * s * d);
        }
      }
      parallel_for(m2, [&](std::size_t y) {
        double* pr = &tre[y * m2];
        double* pi = &tim[y * m2];
        for (std::size_t r = 0; r < R; ++r) {
          const double ar = eyr[r * m2 + y], ai = eyi[r * m2 + y];
          const double* xr = &exr[r * m2];
          const double* xi = &exi[r * m2];
          for (std::size_t x = 0; x < m2; ++x) {
            pr[x] += ar * xr[x] - ai * xi[x];
            pi[x] += ar * xi[x] + ai * xr[x];
          }
        }
      });
    }
    kernel_.resize(m2 * m2);
    for (std::size_t y = 0; y < m2; ++y)
      for (std::size_t x = 0; x < m2; ++x) {
        // Offset +-n never occurs for r, r' in [0, n).
        const bool unused = (y == n) || (x == n);
        kernel_[y * m2 + x] = unused ? cdouble(0.0) : cdouble(tre[y * m2 + x], tim[y * m2 + x]);
      }
    fft_.forward(kernel_);
    const double norm = 1.0 / static_cast<double>(m2 * m2);
    for (auto& v : kernel_) v *= norm;
  }

  std::size_t size() const noexcept { return n_; }

  std::vector<cdouble> apply(const std::vector<cdouble>& x) const {
    const std::size_t m2 = 2 * n_;
    std::vector<cdouble> pad(m2 * m2, 0.0);
    for (std::size_t y = 0; y < n_; ++y)
      for (std::size_t xx = 0; xx < n_; ++xx) pad[y * m2 + xx] = x[y * n_ + xx];
    fft_.forward(pad);
    for (std::size_t i = 0; i < pad.size(); ++i) pad[i] *= kernel_[i];
    fft_.inverse(pad);
    std::vector<cdouble> out(n_ * n_);
    for (std::size_t y = 0; y < n_; ++y)
      for (std::size_t xx = 0; xx < n_; ++xx) out[y * n_ + xx] = pad[y * m2 + xx];
    return out;
  }

  /// Largest eigenvalue by power iteration (deterministic start vector).
  double max_eigenvalue(int iterations = 40) const {
    std::vector<cdouble> v(n_ * n_);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 + 0.01 * static_cast<double>(i % 7);
    double lambda = 0.0;
    for (int it = 0; it < iterations; ++it) {
      double nrm = 0.0;
      for (const auto& a : v) nrm += std::norm(a);
      nrm = std::sqrt(nrm);
      for (auto& a : v) a /= nrm;
      auto w = apply(v);
      double num = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) num += (std::conj(v[i]) * w[i]).real();
      lambda = num;
      v.swap(w);
    }
    return lambda;
  }

 private:
  std::size_t n_;
  Fft2 fft_;
  std::vector<cdouble> kernel_;
};

namespace detail {

inline cdouble soft(cdouble z, double t) {
  const double a = std::abs(z);
  return a <= t ? cdouble(0.0) : z * ((a - t) / a);
}

}  // namespace detail

/// One sweep of anisotropic TV shrinkage: for each direction (x, y) and pairing offset (0, 1),
/// the difference of every adjacent pair is soft-thresholded by 2 * threshold with the pair mean
/// kept; the four results are averaged.
inline std::vector<cdouble> tv_shrink(const std::vector<cdouble>& x, std::size_t n, double threshold) {
  if (threshold <= 0.0) return x;
  std::vector<cdouble> acc(x.size(), 0.0);
  for (int dir = 0; dir < 2; ++dir)
    for (std::size_t shift = 0; shift < 2; ++shift) {
      std::vector<cdouble> z = x;
      for (std::size_t line = 0; line < n; ++line)
        for (std::size_t i = shift; i + 1 < n; i += 2) {
          const std::size_t a = dir == 0 ? line * n + i : i * n + line;
          const std::size_t b = dir == 0 ? line * n + i + 1 : (i + 1) * n + line;
          const cdouble mean = 0.5 * (z[a] + z[b]);
          const cdouble d = detail::soft(z[a] - z[b], 2.0 * threshold);
          z[a] = mean + 0.5 * d;
          z[b] = mean - 0.5 * d;
        }
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += z[i];
    }
  for (auto& v : acc) v *= 0.25;
  return acc;
}

struct CsResult {
  Image magnitude;
  Array2<cdouble> complex_image;
  std::vector<double> residuals;  // ||A x - y||^2 at the start and after each iteration
};

/// Normal operator of one trajectory with its Lipschitz bound; reusable across b-values.
struct CsOperator {
  ToeplitzNormal normal;
  double lipschitz;

  CsOperator(const RadialTrajectory& t, std::size_t n) : normal(t, n), lipschitz(1.01 * normal.max_eigenvalue()) {}
};

/// Proximal gradient on ||A x - y||^2 / L + tv_weight * TV(x), L = ||A^H A||, started from the
/// gridding reconstruction. Aborts when the residual exceeds 10x its initial value.
inline CsResult cs_reconstruct_detailed(const RadialKSpace& ks, const CsParams& cs, const GriddingParams& gp,
                                        const CsOperator& op) {
  cs.validate();
  ks.validate();
  detail::check_gridding(ks.trajectory, gp);
  const std::size_t n = gp.grid.width;
  if (op.normal.size() != n) throw DataError("CS operator size mismatch");
  const auto aty = nudft_adjoint(ks.samples, n, ks.trajectory);
  double yy = 0.0;
  for (const auto& s : ks.samples) yy += std::norm(s);

  auto init = grid_reconstruct_complex(ks, gp);
  std::vector<cdouble> x(init.begin(), init.end());
  auto ata_x = op.normal.apply(x);
  auto residual = [&] {
    double r = yy;
    for (std::size_t i = 0; i < x.size(); ++i) r += (std::conj(x[i]) * ata_x[i]).real() - 2.0 * (std::conj(x[i]) * aty[i]).real();
    return std::max(r, 0.0);
  };

  CsResult out;
  out.residuals.push_back(residual());
  const double r0 = out.residuals.front();
  const double step = cs.step / op.lipschitz;
  for (int it = 0; it < cs.iterations; ++it) {
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= step * (ata_x[i] - aty[i]);
    x = tv_shrink(x, n, cs.tv_weight * cs.step);
    ata_x = op.normal.apply(x);
    const double r = residual();
    out.residuals.push_back(r);
    if (!std::isfinite(r) || (r0 > 0.0 && r > 10.0 * r0))
      throw NumericalError("CS diverged at iteration " + std::to_string(it + 1) + ": residual " + std::to_string(r) +
                           " vs initial " + std::to_string(r0));
  }
  out.complex_image = Array2<cdouble>(n, n);
  out.magnitude = Image(n, n);
  for (std::size_t i = 0; i < x.size(); ++i) {
    out.complex_image[i] = x[i];
    out.magnitude[i] = std::abs(x[i]);
  }
  return out;
}

inline CsResult cs_reconstruct_detailed(const RadialKSpace& ks, const CsParams& cs, const GriddingParams& gp) {
  return cs_reconstruct_detailed(ks, cs, gp, CsOperator(ks.trajectory, gp.grid.width));
}

inline Image cs_reconstruct(const RadialKSpace& ks, const CsParams& cs, const GriddingParams& gp) {
  return cs_reconstruct_detailed(ks, cs, gp).magnitude;
}

}  // namespace rdwi
