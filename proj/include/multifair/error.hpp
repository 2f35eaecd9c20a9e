#pragma once

#include <stdexcept>
#include <string>

namespace multifair {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand dimensions do not fit the operation.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied data is out of range (labels, modality index, group attribute).
class InputError : public Error {
 public:
  using Error::Error;
};

/// An object was used in a state that does not allow the call.
class StateError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration value. `key()` names the offending setting when known.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message, std::string key = {})
      : Error(message), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

/// Non-finite values appeared where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed tabular input. `row()` is the 1-based data row, 0 for file-level problems.
class IngestionError : public Error {
 public:
  IngestionError(const std::string& message, std::size_t row)
      : Error(message), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

}  // namespace multifair
