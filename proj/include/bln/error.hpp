#pragma once

#include <stdexcept>
#include <string>

namespace bln {

// Base for everything the library throws on contract violations.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, rank or axis mismatch.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Bad input data: malformed files, labels out of range, uninitialized
// population statistics.
class DataError : public Error {
 public:
  using Error::Error;
};

// Bad configuration or command-line usage.
class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace bln
