#pragma once

#include <stdexcept>
#include <string>

namespace kvlatent {

// Base of everything the library throws. Callers that only care about
// "something went wrong" catch this; the CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Inconsistent extents, geometries or configuration values.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// A NaN or Inf was produced. Carries the name of the producing operation.
class NumericError : public Error {
 public:
  NumericError(std::string op, const std::string& what)
      : Error(op + ": " + what), op_(std::move(op)) {}
  const std::string& op() const noexcept { return op_; }

 private:
  std::string op_;
};

// Checkpoint / corpus / report I/O failures.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace kvlatent
