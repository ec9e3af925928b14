#pragma once

// Image quality metrics over masked pixels and their aggregation into per-method reports.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rdwi/core/errors.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi {

namespace detail {

inline void check_metric_inputs(const Image& a, const Image& b, const Mask& m) {
  if (!a.same_shape(b) || !a.same_shape(m)) throw DataError("metric inputs differ in shape");
}

}  // namespace detail

/// Sample Pearson correlation over masked pixels (two-pass). Empty when either side is constant
/// on the mask; that is tested on the values themselves, since a rounded mean leaves residuals.
inline std::optional<double> pearson_cc(const Image& pred, const Image& truth, const Mask& mask) {
  detail::check_metric_inputs(pred, truth, mask);
  std::size_t n = 0, first = 0;
  double sp = 0.0, st = 0.0;
  bool pred_varies = false, truth_varies = false;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      if (n == 0) first = i;
      pred_varies = pred_varies || pred[i] != pred[first];
      truth_varies = truth_varies || truth[i] != truth[first];
      sp += pred[i];
      st += truth[i];
      ++n;
    }
  if (n < 2) throw DataError("correlation needs at least two masked pixels");
  if (!pred_varies || !truth_varies) return std::nullopt;
  const double mp = sp / static_cast<double>(n), mt = st / static_cast<double>(n);
  double cov = 0.0, vp = 0.0, vt = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      const double dp = pred[i] - mp, dt = truth[i] - mt;
      cov += dp * dt;
      vp += dp * dp;
      vt += dt * dt;
    }
  return std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
}

inline std::optional<double> pearson_cc(const AdcMap& pred, const AdcMap& truth, const Mask& mask) {
  return pearson_cc(pred.values, truth.values, mask);
}

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01, k2 = 0.03;
  double data_range = kAdcMax;
};

/// Normalized 1-D Gaussian taps.
inline std::vector<double> gaussian_taps(std::size_t window, double sigma) {
  std::vector<double> g(window);
  const double c = static_cast<double>(window - 1) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < window; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (double& v : g) v /= s;
  return g;
}

/// SSIM over every fully contained window that touches the mask. Window statistics are
/// Gaussian-weighted over the masked pixels of the window only (weights renormalized), so
/// unmasked pixels never influence the result; with a full mask this is the standard index.
inline double ssim(const Image& pred, const Image& truth, const Mask& mask, const SsimParams& p = {}) {
  detail::check_metric_inputs(pred, truth, mask);
  if (count(mask) == 0) throw DataError("SSIM mask is empty");
  const std::size_t H = pred.height(), W = pred.width(), K = p.window;
  if (H < K || W < K) throw DataError("image smaller than the SSIM window");
  const auto g = gaussian_taps(K, p.sigma);
  const double c1 = (p.k1 * p.data_range) * (p.k1 * p.data_range);
  const double c2 = (p.k2 * p.data_range) * (p.k2 * p.data_range);

  // Separable sums of w*m*{1, x, y, x^2, y^2, xy} over each valid window.
  constexpr std::size_t kMoments = 6;
  const std::size_t OW = W - K + 1, OH = H - K + 1;
  std::vector<double> rows(kMoments * H * OW, 0.0);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t ox = 0; ox < OW; ++ox) {
      double acc[kMoments] = {};
      for (std::size_t k = 0; k < K; ++k) {
        const std::size_t i = y * W + ox + k;
        if (!mask[i]) continue;
        const double w = g[k], a = pred[i], b = truth[i];
        acc[0] += w;
        acc[1] += w * a;
        acc[2] += w * b;
        acc[3] += w * a * a;
        acc[4] += w * b * b;
        acc[5] += w * a * b;
      }
      for (std::size_t m = 0; m < kMoments; ++m) rows[(m * H + y) * OW + ox] = acc[m];
    }
  double total = 0.0;
  std::size_t used = 0;
  for (std::size_t oy = 0; oy < OH; ++oy)
    for (std::size_t ox = 0; ox < OW; ++ox) {
      double s[kMoments] = {};
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t m = 0; m < kMoments; ++m) s[m] += g[k] * rows[(m * H + oy + k) * OW + ox];
      if (s[0] <= 0.0) continue;
      ++used;
      // Equal moments mean an index of exactly 1; the formula can miss it by an ulp once the
      // compiler contracts one side into an FMA and not the other.
      if (s[1] == s[2] && s[3] == s[4] && s[4] == s[5]) {
        total += 1.0;
        continue;
      }
      const double mx = s[1] / s[0], my = s[2] / s[0];
      const double vx = s[3] / s[0] - mx * mx, vy = s[4] / s[0] - my * my, cxy = s[5] / s[0] - mx * my;
      total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / static_cast<double>(used);
}

inline double ssim(const AdcMap& pred, const AdcMap& truth, const Mask& mask, const SsimParams& p = {}) {
  return ssim(pred.values, truth.values, mask, p);
}

/// 10 log10(peak^2 / MSE) over masked pixels; +infinity when MSE is 0.
inline double psnr(const Image& pred, const Image& truth, const Mask& mask, double peak = kAdcMax) {
  detail::check_metric_inputs(pred, truth, mask);
  double se = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      se += (pred[i] - truth[i]) * (pred[i] - truth[i]);
      ++n;
    }
  if (n == 0) throw DataError("PSNR mask is empty");
  const double mse = se / static_cast<double>(n);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

inline double psnr(const AdcMap& pred, const AdcMap& truth, const Mask& mask, double peak = kAdcMax) {
  return psnr(pred.values, truth.values, mask, peak);
}

/// ||pred - truth||^2 / ||truth||^2 over masked pixels.
inline double nmse(const Image& pred, const Image& truth, const Mask& mask) {
  detail::check_metric_inputs(pred, truth, mask);
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i]) {
      num += (pred[i] - truth[i]) * (pred[i] - truth[i]);
      den += truth[i] * truth[i];
    }
  if (den == 0.0) throw DataError("NMSE undefined for zero-norm truth");
  return num / den;
}

inline double nmse(const AdcMap& pred, const AdcMap& truth, const Mask& mask) { return nmse(pred.values, truth.values, mask); }

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{"CC", "SSIM", "PSNR", "NMSE"};
  return names;
}

struct Aggregate {
  double mean = std::numeric_limits<double>::quiet_NaN();
  double std = std::numeric_limits<double>::quiet_NaN();  // population
  std::size_t n_slices = 0, n_excluded = 0;
};

/// Mean and population std of the finite values. Undefined, NaN and infinite entries (the PSNR
/// sentinel of an exact match) are counted as excluded.
inline Aggregate aggregate(const std::vector<std::optional<double>>& values) {
  Aggregate a;
  a.n_slices = values.size();
  std::vector<double> ok;
  for (const auto& v : values)
    if (v && std::isfinite(*v)) ok.push_back(*v);
  a.n_excluded = values.size() - ok.size();
  if (ok.empty()) return a;
  double s = 0.0;
  for (double v : ok) s += v;
  a.mean = s / static_cast<double>(ok.size());
  double ss = 0.0;
  for (double v : ok) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / static_cast<double>(ok.size()));
  return a;
}

/// Evaluation scopes of one slice: name -> mask (e.g. "whole", "tumor").
using SliceScopes = std::vector<std::pair<std::string, Mask>>;

struct MetricsReport {
  std::string method;
  std::vector<std::string> scopes;  // in first-seen order
  // (scope, metric) -> one entry per slice; empty where the metric was undefined or failed
  std::map<std::pair<std::string, std::string>, std::vector<std::optional<double>>> per_slice;

  Aggregate summary(const std::string& scope, const std::string& metric) const {
    auto it = per_slice.find({scope, metric});
    if (it == per_slice.end()) throw DataError("no values for " + scope + "/" + metric);
    return aggregate(it->second);
  }
};

/// All four metrics per scope per slice. A scope missing from a slice, or a metric that fails on
/// it, contributes an excluded entry.
inline MetricsReport evaluate(const std::string& method, const std::vector<AdcMap>& preds, const std::vector<AdcMap>& truths,
                              const std::vector<SliceScopes>& scopes) {
  if (preds.size() != truths.size() || preds.size() != scopes.size()) throw DataError("evaluate: slice counts differ");
  MetricsReport r;
  r.method = method;
  for (const auto& sl : scopes)
    for (const auto& [name, m] : sl)
      if (std::find(r.scopes.begin(), r.scopes.end(), name) == r.scopes.end()) r.scopes.push_back(name);
  for (const auto& scope : r.scopes)
    for (const auto& metric : metric_names()) r.per_slice[{scope, metric}].assign(preds.size(), std::nullopt);
  for (std::size_t s = 0; s < preds.size(); ++s) {
    if (!preds[s].values.same_shape(truths[s].values)) throw DataError("evaluate: geometry mismatch at slice " + std::to_string(s));
    for (const auto& [name, m] : scopes[s]) {
      auto put = [&](const std::string& metric, auto&& fn) {
        try {
          r.per_slice[{name, metric}][s] = fn();
        } catch (const DataError&) {
        }
      };
      put("CC", [&]() { return pearson_cc(preds[s], truths[s], m); });
      put("SSIM", [&]() { return std::optional<double>(ssim(preds[s], truths[s], m)); });
      put("PSNR", [&]() { return std::optional<double>(psnr(preds[s], truths[s], m)); });
      put("NMSE", [&]() { return std::optional<double>(nmse(preds[s], truths[s], m)); });
    }
  }
  return r;
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

/// CSV with one row per (method, scope, metric). The leading comment records the fixed range.
inline std::string to_csv(const std::vector<MetricsReport>& reports) {
  std::ostringstream out;
  out << "# dynamic_range=0.0032 (fixed; PSNR peak and SSIM L)\n";
  out << "method,scope,metric,mean,std,n_slices,n_excluded\n";
  for (const auto& r : reports)
    for (const auto& scope : r.scopes)
      for (const auto& metric : metric_names()) {
        const auto a = r.summary(scope, metric);
        out << r.method << ',' << scope << ',' << metric << ',' << format_number(a.mean) << ',' << format_number(a.std) << ','
            << a.n_slices << ',' << a.n_excluded << '\n';
      }
  return out.str();
}

}  // namespace rdwi
