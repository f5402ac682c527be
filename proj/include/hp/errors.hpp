#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace hp {

// Base for every error raised by the library. Errors deriving from
// InputError describe bad data or bad arguments supplied by the caller;
// anything else escaping the library is an internal fault.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InputError : public Error {
 public:
  using Error::Error;
};

class DegenerateInput : public InputError {
 public:
  using InputError::InputError;
};

class DimensionMismatch : public InputError {
 public:
  using InputError::InputError;
};

class InvariantViolation : public InputError {
 public:
  using InputError::InputError;
};

class NonFiniteValue : public Error {
 public:
  using Error::Error;
};

enum class FormatErrorKind { io, bad_magic, bad_version, truncated, trailing_data, invariant };

class FormatError : public InputError {
 public:
  FormatError(FormatErrorKind kind, const std::string& what) : InputError(what), kind_(kind) {}
  FormatErrorKind kind() const noexcept { return kind_; }

 private:
  FormatErrorKind kind_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InputError(msg);
}

inline void require_dims(bool cond, const std::string& msg) {
  if (!cond) throw DimensionMismatch(msg);
}

}  // namespace detail
}  // namespace hp
