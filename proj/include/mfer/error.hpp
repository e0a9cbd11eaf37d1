#pragma once

#include <stdexcept>
#include <string>

namespace mfer {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad input or violated precondition (malformed files, wrong shapes, invalid config).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A computation produced a non-finite value.
class NumericError : public Error {
 public:
  using Error::Error;
};

[[noreturn]] void throw_validation(const std::string& what);

}  // namespace mfer
