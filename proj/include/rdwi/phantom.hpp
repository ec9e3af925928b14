#pragma once

// Synthetic abdominal-style phantoms and noiseless DWI rendering.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "rdwi/core/errors.hpp"
#include "rdwi/core/rng.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi {

// Shapes live in normalized [0,1]^2 image coordinates, u along x (columns), v along y (rows).
struct Ellipse {
  double cx, cy, rx, ry;
};
struct Circle {
  double cx, cy, r;
};
struct Annulus {
  double cx, cy, r_inner, r_outer;
};
using Shape = std::variant<Ellipse, Circle, Annulus>;

inline bool contains(const Shape& s, double u, double v) {
  return std::visit(
      [&](const auto& sh) -> bool {
        using S = std::decay_t<decltype(sh)>;
        if constexpr (std::is_same_v<S, Ellipse>) {
          const double a = (u - sh.cx) / sh.rx, b = (v - sh.cy) / sh.ry;
          return a * a + b * b <= 1.0;
        } else if constexpr (std::is_same_v<S, Circle>) {
          const double a = u - sh.cx, b = v - sh.cy;
          return a * a + b * b <= sh.r * sh.r;
        } else {
          const double a = u - sh.cx, b = v - sh.cy, d2 = a * a + b * b;
          return d2 >= sh.r_inner * sh.r_inner && d2 <= sh.r_outer * sh.r_outer;
        }
      },
      s);
}

struct ShapeFrame {
  double cx, cy, extent_x, extent_y;
};

inline ShapeFrame frame_of(const Shape& s) {
  return std::visit(
      [](const auto& sh) -> ShapeFrame {
        using S = std::decay_t<decltype(sh)>;
        if constexpr (std::is_same_v<S, Ellipse>) return {sh.cx, sh.cy, sh.rx, sh.ry};
        else if constexpr (std::is_same_v<S, Circle>) return {sh.cx, sh.cy, sh.r, sh.r};
        else return {sh.cx, sh.cy, sh.r_outer, sh.r_outer};
      },
      s);
}

struct Range {
  double lo, hi;
};

struct TissueSpec {
  std::string label;
  Range adc_range;  // mm^2/s
  Range s0_range;
  Shape shape;

  void validate() const {
    if (label.empty() || label == "background") throw ConfigError("invalid tissue label '" + label + "'");
    if (!(adc_range.lo >= 0.0 && adc_range.lo <= adc_range.hi && adc_range.hi <= kAdcMax))
      throw ConfigError("tissue " + label + ": ADC range must satisfy 0 <= lo <= hi <= 0.0032");
    if (!(s0_range.lo >= 0.0 && s0_range.lo <= s0_range.hi))
      throw ConfigError("tissue " + label + ": S0 range must satisfy 0 <= lo <= hi");
    const auto f = frame_of(shape);
    if (!(f.extent_x > 0.0 && f.extent_y > 0.0) || f.cx - f.extent_x < 0.0 || f.cx + f.extent_x > 1.0 ||
        f.cy - f.extent_y < 0.0 || f.cy + f.extent_y > 1.0)
      throw ConfigError("tissue " + label + ": shape leaves the unit square");
    if (const auto* a = std::get_if<Annulus>(&shape); a && !(a->r_inner >= 0.0 && a->r_inner < a->r_outer))
      throw ConfigError("tissue " + label + ": annulus radii must satisfy 0 <= inner < outer");
  }
};

struct Phantom {
  Grid2D grid;
  Array2<int> labels;                   // 0 = background
  std::vector<std::string> label_names;  // index = label id; [0] = "background"
  AdcMap adc_truth;                     // valid = tissue pixels
  S0Map s0_truth;

  int label_id(const std::string& name) const {
    for (std::size_t i = 0; i < label_names.size(); ++i)
      if (label_names[i] == name) return static_cast<int>(i);
    throw DataError("unknown label '" + name + "'");
  }
};

/// Body ellipse ("muscle") with a tumor disk and a kidney disk.
inline std::vector<TissueSpec> default_tissues() {
  return {
      {"muscle", {0.0012, 0.0016}, {0.55, 0.75}, Ellipse{0.5, 0.5, 0.38, 0.30}},
      {"tumor", {0.0008, 0.0012}, {0.80, 1.00}, Circle{0.40, 0.42, 0.10}},
      {"kidney", {0.0016, 0.0020}, {0.70, 0.90}, Circle{0.64, 0.56, 0.08}},
  };
}

/// Randomized geometry for training and test sets: body, tumor, one or two kidneys and
/// occasionally a free-water-like fluid pocket.
inline std::vector<TissueSpec> random_tissues(SeededRng& rng) {
  std::vector<TissueSpec> t;
  const double bcx = rng.uniform(0.46, 0.54), bcy = rng.uniform(0.46, 0.54);
  const double brx = rng.uniform(0.32, 0.42), bry = rng.uniform(0.26, 0.36);
  t.push_back({"muscle", {0.0011, 0.0016}, {0.50, 0.75}, Ellipse{bcx, bcy, brx, bry}});

  // Places a disk of radius r fully inside the body ellipse.
  auto inside_body = [&](double r) {
    for (;;) {
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double rad = std::sqrt(rng.uniform());
      const double ex = std::max(brx - r, 0.0), ey = std::max(bry - r, 0.0);
      const double cx = bcx + 0.9 * ex * rad * std::cos(ang), cy = bcy + 0.9 * ey * rad * std::sin(ang);
      if (cx - r >= 0.0 && cx + r <= 1.0 && cy - r >= 0.0 && cy + r <= 1.0) return Circle{cx, cy, r};
    }
  };

  const int kidneys = 1 + static_cast<int>(rng.below(2));
  for (int k = 0; k < kidneys; ++k)
    t.push_back({"kidney", {0.0016, 0.0021}, {0.65, 0.90}, inside_body(rng.uniform(0.05, 0.085))});
  if (rng.uniform() < 0.4) t.push_back({"fluid", {0.0026, 0.0030}, {0.85, 1.00}, inside_body(rng.uniform(0.03, 0.05))});
  t.push_back({"tumor", {0.0007, 0.0012}, {0.80, 1.00}, inside_body(rng.uniform(0.06, 0.12))});
  return t;
}

namespace detail {

// Smooth fraction field in [0,1]: quadratic polynomial in shape-relative coordinates plus a
// few low-frequency sinusoids.
struct SmoothField {
  double a[5];
  double amp[3], fx[3], fy[3], phase[3];
  ShapeFrame frame;

  SmoothField(SeededRng& rng, const ShapeFrame& f) : frame(f) {
    for (double& c : a) c = rng.uniform(-0.2, 0.2);
    for (int k = 0; k < 3; ++k) {
      amp[k] = rng.uniform(0.0, 0.05);
      fx[k] = rng.uniform(-3.0, 3.0);
      fy[k] = rng.uniform(-3.0, 3.0);
      phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
    }
  }

  double operator()(double u, double v) const {
    const double du = (u - frame.cx) / frame.extent_x, dv = (v - frame.cy) / frame.extent_y;
    double t = 0.5 + a[0] * du + a[1] * dv + a[2] * du * du + a[3] * du * dv + a[4] * dv * dv;
    for (int k = 0; k < 3; ++k) t += amp[k] * std::sin(2.0 * std::numbers::pi * (fx[k] * u + fy[k] * v) + phase[k]);
    return std::clamp(t, 0.0, 1.0);
  }
};

}  // namespace detail

/// Rasterizes tissues in order (later ones overwrite earlier ones) and draws smooth ADC/S0
/// fields clipped to each tissue's range. Pixel (y, x) samples the shape at its center.
inline Phantom make_phantom(const Grid2D& grid, const std::vector<TissueSpec>& tissues, const SeededRng& rng) {
  grid.validate();
  if (tissues.empty()) throw ConfigError("phantom needs at least one tissue");
  for (const auto& t : tissues) t.validate();

  Phantom ph;
  ph.grid = grid;
  ph.label_names = {"background"};
  const std::size_t h = grid.height, w = grid.width;
  ph.labels = Array2<int>(h, w, 0);
  ph.adc_truth = AdcMap(h, w);
  ph.s0_truth.values = Image(h, w, 0.0);

  for (std::size_t ti = 0; ti < tissues.size(); ++ti) {
    const auto& t = tissues[ti];
    auto it = std::find(ph.label_names.begin(), ph.label_names.end(), t.label);
    if (it == ph.label_names.end()) it = ph.label_names.insert(ph.label_names.end(), t.label);
    const int id = static_cast<int>(it - ph.label_names.begin());

    SeededRng trng = rng.fork(ti);
    const auto frame = frame_of(t.shape);
    const detail::SmoothField adc_field(trng, frame);
    const detail::SmoothField s0_field(trng, frame);

    for (std::size_t y = 0; y < h; ++y) {
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(h);
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(w);
        if (!contains(t.shape, u, v)) continue;
        ph.labels(y, x) = id;
        ph.adc_truth.values(y, x) = t.adc_range.lo + adc_field(u, v) * (t.adc_range.hi - t.adc_range.lo);
        ph.adc_truth.valid(y, x) = 1;
        ph.s0_truth.values(y, x) = t.s0_range.lo + s0_field(u, v) * (t.s0_range.hi - t.s0_range.lo);
      }
    }
  }
  return ph;
}

/// Monoexponential signal S0 * exp(-b * ADC).
inline double mono_signal(double s0, double b, double adc) noexcept { return s0 * std::exp(-b * adc); }

inline DwiStack render_dwi(const Phantom& ph, const BProtocol& protocol) {
  DwiStack out;
  out.protocol = protocol;
  out.provenance.kind = Provenance::Kind::synthesized;
  const auto& adc = ph.adc_truth.values;
  const auto& s0 = ph.s0_truth.values;
  for (double b : protocol.b_values()) {
    Image im(adc.height(), adc.width());
    for (std::size_t i = 0; i < im.size(); ++i) im[i] = mono_signal(s0[i], b, adc[i]);
    out.images.push_back(std::move(im));
  }
  return out;
}

inline Mask roi_mask(const Phantom& ph, const std::string& label) {
  const int id = ph.label_id(label);
  Mask m(ph.labels.height(), ph.labels.width(), 0);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = ph.labels[i] == id ? 1 : 0;
  return m;
}

}  // namespace rdwi
