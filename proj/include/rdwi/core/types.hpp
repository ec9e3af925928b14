#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "rdwi/core/errors.hpp"

namespace rdwi {

/// Physiological upper bound on ADC: free water at 37 C, in mm^2/s.
inline constexpr double kAdcMax = 0.0032;
inline constexpr double kAdcMin = 0.0;

/// Dense row-major H x W array.
template <class T>
class Array2 {
 public:
  Array2() = default;
  Array2(std::size_t height, std::size_t width, T fill = T{})
      : height_(height), width_(width), data_(height * width, fill) {}

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool same_shape(const Array2& o) const noexcept { return height_ == o.height_ && width_ == o.width_; }
  template <class U>
  bool same_shape(const Array2<U>& o) const noexcept {
    return height_ == o.height() && width_ == o.width();
  }

  T& operator()(std::size_t y, std::size_t x) noexcept { return data_[y * width_ + x]; }
  const T& operator()(std::size_t y, std::size_t x) const noexcept { return data_[y * width_ + x]; }
  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::vector<T>& values() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  auto begin() noexcept { return data_.begin(); }
  auto end() noexcept { return data_.end(); }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  friend bool operator==(const Array2&, const Array2&) = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::vector<T> data_;
};

using Image = Array2<double>;
using Mask = Array2<std::uint8_t>;

inline std::size_t count(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.begin(), m.end(), [](std::uint8_t v) { return v != 0; }));
}

/// Ascending diffusion weightings in s/mm^2.
class BProtocol {
 public:
  BProtocol() : BProtocol(std::vector<double>{10.0, 535.0, 1070.0, 1479.0, 2141.0}) {}

  explicit BProtocol(std::vector<double> b_values) : b_(std::move(b_values)) {
    if (b_.size() < 2) throw ConfigError("protocol needs at least two b-values");
    for (std::size_t i = 0; i < b_.size(); ++i) {
      if (!(b_[i] >= 0.0)) throw ConfigError("b-values must be non-negative");
      if (i > 0 && !(b_[i] > b_[i - 1])) throw ConfigError("b-values must be strictly ascending");
    }
  }

  const std::vector<double>& b_values() const noexcept { return b_; }
  std::size_t size() const noexcept { return b_.size(); }
  double operator[](std::size_t i) const noexcept { return b_[i]; }

  friend bool operator==(const BProtocol&, const BProtocol&) = default;

 private:
  std::vector<double> b_;
};

struct Grid2D {
  std::size_t height = 64;
  std::size_t width = 64;
  double fov_mm = 32.0;

  void validate() const {
    if (height == 0 || width == 0) throw ConfigError("grid dimensions must be positive");
    if (height % 2 != 0 || width % 2 != 0) throw ConfigError("grid dimensions must be even");
    if (!(fov_mm > 0.0)) throw ConfigError("field of view must be positive");
  }

  friend bool operator==(const Grid2D&, const Grid2D&) = default;
};

struct AdcMap {
  Image values;  // mm^2/s
  Mask valid;

  AdcMap() = default;
  AdcMap(std::size_t h, std::size_t w) : values(h, w, 0.0), valid(h, w, 0) {}

  std::size_t height() const noexcept { return values.height(); }
  std::size_t width() const noexcept { return values.width(); }
};

struct S0Map {
  Image values;
};

struct Provenance {
  enum class Kind { full, accelerated, synthesized };
  Kind kind = Kind::synthesized;
  int factor = 1;

  std::string to_string() const {
    switch (kind) {
      case Kind::full: return "full";
      case Kind::accelerated: return "accelerated(" + std::to_string(factor) + ")";
      case Kind::synthesized: return "synthesized";
    }
    return "unknown";
  }
};

/// n diffusion-weighted images, one per b-value of the protocol.
struct DwiStack {
  std::vector<Image> images;
  BProtocol protocol;
  Provenance provenance;

  std::size_t height() const noexcept { return images.empty() ? 0 : images.front().height(); }
  std::size_t width() const noexcept { return images.empty() ? 0 : images.front().width(); }

  void validate() const {
    if (images.size() != protocol.size()) throw DataError("DWI stack size does not match protocol");
    for (const auto& im : images) {
      if (!im.same_shape(images.front())) throw DataError("DWI images have inconsistent shapes");
      for (double v : im)
        if (!(v >= 0.0)) throw DataError("DWI intensities must be finite and non-negative");
    }
  }
};

}  // namespace rdwi
