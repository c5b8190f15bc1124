#pragma once

#include <stdexcept>
#include <string>

namespace ptlab {

/// Base exception for all contract violations raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a user-supplied spec or file fails validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

}  // namespace ptlab
