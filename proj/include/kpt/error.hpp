#pragma once

#include <stdexcept>
#include <string>

namespace kpt {

// Each category maps onto one CLI exit code (see cli.hpp).
enum class ErrorKind { usage = 2, io = 3, numeric = 4, inconsistent = 5 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Invalid argument, shape, configuration or schema.
class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

/// NaN/Inf encountered in data, activations, gradients or losses.
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class InconsistentError : public Error {
 public:
  explicit InconsistentError(const std::string& what)
      : Error(ErrorKind::inconsistent, what) {}
};

}  // namespace kpt
