#pragma once

#include <stdexcept>
#include <string>

namespace rdwi {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration. CLI exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Missing, malformed or geometrically inconsistent data. CLI exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

/// QDWI decoding failures, classified so callers (and tests) can tell them apart.
class FormatError : public DataError {
 public:
  enum class Kind { io, bad_magic, bad_version, unsupported_dtype, bad_ndim, truncated, size_mismatch };

  FormatError(Kind kind, const std::string& what) : DataError(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Non-finite values, divergence, ill-conditioned divisors. CLI exit code 4.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace rdwi
