#pragma once

#include <stdexcept>
#include <string>

namespace objslam {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller broke a documented precondition (arity, ranges, unknown names).
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometry : public Error {
 public:
  using Error::Error;
};

class PointBehindCamera : public Error {
 public:
  using Error::Error;
};

class NonConvergence : public Error {
 public:
  using Error::Error;
};

// Malformed or mismatched file contents.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace objslam
