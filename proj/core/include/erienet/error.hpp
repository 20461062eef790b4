#pragma once

#include <stdexcept>
#include <string>

namespace erienet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes or dimensions that do not satisfy an operation's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid argument values (odd kernels, nonpositive ratios, unknown enums).
class ArgumentError : public Error {
 public:
  using Error::Error;
};

/// Model configuration that fails validation; the message lists every violation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Operation invoked in a state that does not allow it (e.g. eval batch norm without statistics).
class StateError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Malformed file header or payload.
class FormatError : public IoError {
 public:
  using IoError::IoError;
};

/// File ended before the declared payload was read.
class TruncatedError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// The JSON sidecar for a mosaic does not exist.
class MissingSidecarError : public IoError {
 public:
  using IoError::IoError;
};

/// A required field is absent or invalid; `field()` names it.
class FieldError : public FormatError {
 public:
  FieldError(std::string field, const std::string& what)
      : FormatError(what), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class BadMagicError : public FormatError {
 public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

class NameCollisionError : public FormatError {
 public:
  using FormatError::FormatError;
};

}  // namespace erienet
