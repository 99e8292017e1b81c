#pragma once

#include <stdexcept>
#include <string>

namespace depthlens {

// Base for every error raised by the library. The CLI maps the concrete
// subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dimensions of two operands, or of a file and its manifest, disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Content is well-shaped but violates a data invariant.
class DataError : public Error {
 public:
  using Error::Error;
};

// Filesystem failure; the message always carries the path.
class IoError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or option values supplied by the caller.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Non-finite input or intermediate value.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace depthlens
