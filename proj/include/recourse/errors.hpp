#pragma once

#include <stdexcept>
#include <string>

namespace recourse {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclass onto its exit code.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& message) : std::runtime_error(message) {}
};

/// Invalid configuration or arguments (exit code 1).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& message) : Error(message) {}
};

/// Malformed or inconsistent data: bad files, unknown ids, dimension
/// mismatches (exit code 2).
class DataError : public Error {
 public:
  explicit DataError(const std::string& message) : Error(message) {}
};

/// Numerical failure such as a diverging optimizer (exit code 3).
class NumericError : public Error {
 public:
  explicit NumericError(const std::string& message) : Error(message) {}
};

}  // namespace recourse
