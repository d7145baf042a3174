#pragma once

#include <stdexcept>
#include <string>

namespace logstab {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractViolation : public Error {
 public:
  using Error::Error;
};

/// Malformed text input. `line()` is 1-based; 0 when unknown.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what), line_(line), detail_(what) {}

  std::size_t line() const noexcept { return line_; }
  /// The message without the line prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::size_t line_;
  std::string detail_;
};

/// Problem too large for an exhaustive routine.
class CapacityError : public Error {
 public:
  using Error::Error;
};

/// Invalid experiment or model configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A numerical iteration produced non-finite values.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

/// An iterative solver did not reach its tolerance.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace logstab
