#pragma once

// QDWI binary tensor format.
//
//   bytes 0-3   magic "QDWI"
//   bytes 4-5   version, u16 little-endian (= 1)
//   byte  6     dtype: 0 = f32, 1 = f64, 2 = complex64 (interleaved f32 re, im)
//   byte  7     ndim (<= 4)
//   4*ndim      dims, u32 little-endian
//   payload     row-major, little-endian

#include <bit>
#include <complex>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rdwi/core/errors.hpp"
#include "rdwi/core/types.hpp"

namespace rdwi {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, c64 = 2 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::c64: return 8;
  }
  return 0;
}

/// N-dimensional (N <= 4) array in one of the QDWI element types.
class NdArray {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::complex<float>>>;

  NdArray() : storage_(std::vector<float>{}) {}

  template <class T>
  NdArray(std::vector<std::uint32_t> dims, std::vector<T> values) : dims_(std::move(dims)), storage_(std::move(values)) {
    check_shape();
  }

  static NdArray zeros(DType t, std::vector<std::uint32_t> dims) {
    const std::size_t n = element_count(dims);
    switch (t) {
      case DType::f32: return NdArray(std::move(dims), std::vector<float>(n));
      case DType::f64: return NdArray(std::move(dims), std::vector<double>(n));
      case DType::c64: return NdArray(std::move(dims), std::vector<std::complex<float>>(n));
    }
    throw FormatError(FormatError::Kind::unsupported_dtype, "unsupported dtype");
  }

  DType dtype() const noexcept { return static_cast<DType>(storage_.index()); }
  const std::vector<std::uint32_t>& dims() const noexcept { return dims_; }
  std::size_t ndim() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return element_count(dims_); }

  template <class T>
  std::vector<T>& as() {
    return std::get<std::vector<T>>(storage_);
  }
  template <class T>
  const std::vector<T>& as() const {
    return std::get<std::vector<T>>(storage_);
  }

  /// Real values widened to double (f32/f64 only).
  std::vector<double> to_f64() const {
    if (auto* f = std::get_if<std::vector<float>>(&storage_)) return {f->begin(), f->end()};
    if (auto* d = std::get_if<std::vector<double>>(&storage_)) return *d;
    throw DataError("expected a real-valued tensor");
  }

  static std::size_t element_count(const std::vector<std::uint32_t>& dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1},
                           [](std::size_t a, std::uint32_t d) { return a * d; });
  }

  friend bool operator==(const NdArray& a, const NdArray& b) {
    if (a.dims_ != b.dims_ || a.storage_.index() != b.storage_.index()) return false;
    // Bitwise comparison so NaN payloads and signed zeros round-trip exactly.
    return std::visit(
        [&](const auto& va) {
          using V = std::decay_t<decltype(va)>;
          const auto& vb = std::get<V>(b.storage_);
          return va.size() == vb.size() &&
                 (va.empty() || std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0);
        },
        a.storage_);
  }

 private:
  void check_shape() const {
    if (dims_.size() > 4) throw FormatError(FormatError::Kind::bad_ndim, "QDWI supports at most 4 dimensions");
    const std::size_t n = element_count(dims_);
    const std::size_t have = std::visit([](const auto& v) { return v.size(); }, storage_);
    if (n != have) throw DataError("tensor dims do not match value count");
  }

  std::vector<std::uint32_t> dims_;
  Storage storage_;
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class U>
inline void put_le(std::vector<std::uint8_t>& out, U value) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
}

template <class U>
inline U get_le(const std::uint8_t* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(p[i]) << (8 * i));
  return v;
}

inline void put_f32(std::vector<std::uint8_t>& out, float f) { put_le(out, std::bit_cast<std::uint32_t>(f)); }
inline void put_f64(std::vector<std::uint8_t>& out, double d) { put_le(out, std::bit_cast<std::uint64_t>(d)); }

}  // namespace detail

/// Serialized QDWI bytes. Identical input gives identical bytes.
inline std::vector<std::uint8_t> encode_tensor(const NdArray& a) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + 4 * a.ndim() + a.size() * dtype_size(a.dtype()));
  for (char c : {'Q', 'D', 'W', 'I'}) out.push_back(static_cast<std::uint8_t>(c));
  detail::put_le<std::uint16_t>(out, 1);
  out.push_back(static_cast<std::uint8_t>(a.dtype()));
  out.push_back(static_cast<std::uint8_t>(a.ndim()));
  for (auto d : a.dims()) detail::put_le<std::uint32_t>(out, d);
  switch (a.dtype()) {
    case DType::f32:
      for (float f : a.as<float>()) detail::put_f32(out, f);
      break;
    case DType::f64:
      for (double d : a.as<double>()) detail::put_f64(out, d);
      break;
    case DType::c64:
      for (const auto& c : a.as<std::complex<float>>()) {
        detail::put_f32(out, c.real());
        detail::put_f32(out, c.imag());
      }
      break;
  }
  return out;
}

inline NdArray decode_tensor(std::span<const std::uint8_t> bytes) {
  using K = FormatError::Kind;
  if (bytes.size() < 8) throw FormatError(K::truncated, "QDWI header truncated");
  if (std::memcmp(bytes.data(), "QDWI", 4) != 0) throw FormatError(K::bad_magic, "bad QDWI magic");
  const auto version = detail::get_le<std::uint16_t>(bytes.data() + 4);
  if (version != 1) throw FormatError(K::bad_version, "unsupported QDWI version " + std::to_string(version));
  const std::uint8_t dt = bytes[6];
  if (dt > 2) throw FormatError(K::unsupported_dtype, "unsupported QDWI dtype " + std::to_string(dt));
  const std::size_t ndim = bytes[7];
  if (ndim > 4) throw FormatError(K::bad_ndim, "QDWI ndim above 4");
  if (bytes.size() < 8 + 4 * ndim) throw FormatError(K::truncated, "QDWI dims truncated");
  std::vector<std::uint32_t> dims(ndim);
  for (std::size_t i = 0; i < ndim; ++i) dims[i] = detail::get_le<std::uint32_t>(bytes.data() + 8 + 4 * i);
  const auto dtype = static_cast<DType>(dt);
  const std::size_t offset = 8 + 4 * ndim;
  const std::size_t payload = bytes.size() - offset;
  // Element count capped by what the payload could hold, so corrupt dims cannot overflow.
  const std::size_t cap = payload / dtype_size(dtype);
  std::size_t n = 1;
  bool zero = false;
  for (auto d : dims) zero = zero || d == 0;
  if (zero) {
    n = 0;
  } else {
    for (auto d : dims) {
      if (n > cap / d) throw FormatError(K::truncated, "QDWI payload truncated");
      n *= d;
    }
  }
  const std::size_t want = n * dtype_size(dtype);
  if (payload < want) throw FormatError(K::truncated, "QDWI payload truncated");
  if (payload > want) throw FormatError(K::size_mismatch, "QDWI payload larger than dims imply");
  const std::uint8_t* p = bytes.data() + offset;
  switch (dtype) {
    case DType::f32: {
      std::vector<float> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
      return NdArray(std::move(dims), std::move(v));
    }
    case DType::f64: {
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + 8 * i));
      return NdArray(std::move(dims), std::move(v));
    }
    case DType::c64: {
      std::vector<std::complex<float>> v(n);
      for (std::size_t i = 0; i < n; ++i)
        v[i] = {std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 8 * i)),
                std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 8 * i + 4))};
      return NdArray(std::move(dims), std::move(v));
    }
  }
  throw FormatError(K::unsupported_dtype, "unsupported dtype");
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw FormatError(FormatError::Kind::io, "write failed: " + path.string());
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::io, "cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save_tensor(const std::filesystem::path& path, const NdArray& a) { write_bytes(path, encode_tensor(a)); }

inline NdArray load_tensor(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  return decode_tensor(bytes);
}

// Conversions between images and tensors.

inline NdArray to_tensor(const Image& im, DType t = DType::f32) {
  const std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(im.height()), static_cast<std::uint32_t>(im.width())};
  if (t == DType::f64) return NdArray(dims, im.values());
  return NdArray(dims, std::vector<float>(im.begin(), im.end()));
}

/// Stacks equally sized images along a leading dimension.
inline NdArray stack_tensor(std::span<const Image> ims, DType t = DType::f32) {
  if (ims.empty()) return NdArray::zeros(t, {0, 0, 0});
  const auto h = static_cast<std::uint32_t>(ims[0].height());
  const auto w = static_cast<std::uint32_t>(ims[0].width());
  std::vector<double> all;
  all.reserve(ims.size() * h * w);
  for (const auto& im : ims) {
    if (!im.same_shape(ims[0])) throw DataError("cannot stack images of different shapes");
    all.insert(all.end(), im.begin(), im.end());
  }
  std::vector<std::uint32_t> dims{static_cast<std::uint32_t>(ims.size()), h, w};
  if (t == DType::f64) return NdArray(std::move(dims), std::move(all));
  return NdArray(std::move(dims), std::vector<float>(all.begin(), all.end()));
}

/// Splits the trailing two dimensions into images (leading dims flattened).
inline std::vector<Image> unstack_images(const NdArray& a) {
  if (a.ndim() < 2) throw DataError("tensor has fewer than 2 dims");
  const auto& d = a.dims();
  const std::size_t h = d[d.size() - 2], w = d[d.size() - 1];
  const std::size_t n = (h * w == 0) ? 0 : a.size() / (h * w);
  const auto v = a.to_f64();
  std::vector<Image> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Image im(h, w);
    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(i * h * w), h * w, im.begin());
    out.push_back(std::move(im));
  }
  return out;
}

}  // namespace rdwi
