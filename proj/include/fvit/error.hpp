#pragma once

#include <stdexcept>
#include <string>

namespace fvit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape or size disagreement between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration or argument values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Problems reading or writing the binary file formats.
class FormatError : public Error {
 public:
  enum class Kind { Io, BadMagic, Truncated, VersionMismatch, HeaderMismatch };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

}  // namespace fvit
