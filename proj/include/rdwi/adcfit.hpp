#pragma once

// Classical ADC estimation from DW images.

#include <algorithm>
#include <cmath>
#include <vector>

#include "rdwi/core/errors.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi {

struct FitResult {
  AdcMap adc;
  S0Map s0;
  Image residual;  // RMS log-domain residual
};

namespace detail {

/// Clips to the physiological range; out-of-range values are clipped and flagged invalid.
inline void store_clipped(AdcMap& out, std::size_t i, double adc) {
  if (!std::isfinite(adc)) {
    out.values[i] = 0.0;
    out.valid[i] = 0;
  } else if (adc < kAdcMin || adc > kAdcMax) {
    out.values[i] = std::clamp(adc, kAdcMin, kAdcMax);
    out.valid[i] = 0;
  } else {
    out.values[i] = adc;
    out.valid[i] = 1;
  }
}

}  // namespace detail

/// ADC = -(ln S_j - ln S_i) / (b_j - b_i) per pixel. Non-positive intensities give ADC 0, invalid.
inline AdcMap fit_two_point(const Image& s_i, const Image& s_j, double b_i, double b_j) {
  if (b_i == b_j) throw DataError("two-point fit needs distinct b-values");
  if (!s_i.same_shape(s_j)) throw DataError("two-point fit images differ in shape");
  AdcMap out(s_i.height(), s_i.width());
  for (std::size_t p = 0; p < s_i.size(); ++p) {
    if (!(s_i[p] > 0.0) || !(s_j[p] > 0.0)) continue;
    detail::store_clipped(out, p, -(std::log(s_j[p]) - std::log(s_i[p])) / (b_j - b_i));
  }
  return out;
}

/// Per-pixel linear least squares of ln S on b over the positive samples: slope = -ADC,
/// intercept = ln S0. Pixels with fewer than two positive samples are invalid with ADC 0.
inline FitResult fit_lsq(const DwiStack& dwi) {
  dwi.validate();
  const std::size_t n = dwi.images.size();
  const std::size_t h = dwi.height(), w = dwi.width();
  const auto& b = dwi.protocol.b_values();
  FitResult r;
  r.adc = AdcMap(h, w);
  r.s0.values = Image(h, w, 0.0);
  r.residual = Image(h, w, 0.0);
  std::vector<double> ls(n);
  std::vector<std::uint8_t> use(n);
  for (std::size_t p = 0; p < h * w; ++p) {
    std::size_t m = 0;
    double sb = 0.0, sl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double s = dwi.images[i][p];
      use[i] = s > 0.0;
      if (use[i]) {
        ls[i] = std::log(s);
        sb += b[i];
        sl += ls[i];
        ++m;
      }
    }
    if (m < 2) continue;
    const double mb = sb / static_cast<double>(m), ml = sl / static_cast<double>(m);
    double sbb = 0.0, sbl = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (use[i]) {
        sbb += (b[i] - mb) * (b[i] - mb);
        sbl += (b[i] - mb) * (ls[i] - ml);
      }
    const double slope = sbl / sbb;
    const double intercept = ml - slope * mb;
    double rss = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (use[i]) {
        const double e = ls[i] - (intercept + slope * b[i]);
        rss += e * e;
      }
    detail::store_clipped(r.adc, p, -slope);
    r.s0.values[p] = std::exp(intercept);
    r.residual[p] = std::sqrt(rss / static_cast<double>(m));
  }
  return r;
}

/// Valid iff 0 <= ADC <= 0.0032 and intensities strictly decrease along the ascending b-values.
/// Pixels the fit already flagged (clipped or non-positive) stay invalid.
inline Mask validity_mask(const DwiStack& dwi, const AdcMap& adc) {
  if (dwi.images.empty() || !dwi.images.front().same_shape(adc.values)) throw DataError("validity mask shape mismatch");
  Mask m(adc.height(), adc.width(), 0);
  for (std::size_t p = 0; p < m.size(); ++p) {
    const double a = adc.values[p];
    bool ok = adc.valid[p] != 0 && a >= kAdcMin && a <= kAdcMax;
    for (std::size_t i = 1; ok && i < dwi.images.size(); ++i) ok = dwi.images[i][p] < dwi.images[i - 1][p];
    m[p] = ok ? 1 : 0;
  }
  return m;
}

}  // namespace rdwi
