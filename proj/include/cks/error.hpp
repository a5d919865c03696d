#pragma once

#include <stdexcept>
#include <string>

namespace cks {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file could not be found or read.
class LoadError : public Error {
 public:
  using Error::Error;
};

/// Input parsed but its content is malformed.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Configuration failed validation.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Array shapes disagree.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A precondition on an argument was violated.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// A loss or parameter went NaN/inf during training.
class NonFiniteError : public Error {
 public:
  NonFiniteError(std::string component, long long step)
      : Error("non-finite value in '" + component + "' at step " + std::to_string(step)),
        component_(std::move(component)),
        step_(step) {}

  const std::string& component() const noexcept { return component_; }
  long long step() const noexcept { return step_; }

 private:
  std::string component_;
  long long step_;
};

}  // namespace cks
