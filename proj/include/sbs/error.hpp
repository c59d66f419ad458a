// Licensed under the Apache License, Version 2.0

#pragma once

#include <stdexcept>
#include <string>

namespace sbs {

// Base of every error the library raises. The CLI maps the concrete type to
// an exit code, so keep the hierarchy flat.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bad magic bytes or unsupported version.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Truncated or trailing payload.
class CorruptionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IndexError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

// Raised when a request would blow up combinatorially (brute-force search).
class RefusalError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

}  // namespace sbs
