#pragma once

#include <stdexcept>
#include <string>

namespace hwbd {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A kernel produced a non-finite value.
class OverflowError : public Error {
 public:
  explicit OverflowError(const std::string& kernel)
      : Error("non-finite result in kernel '" + kernel + "'"), kernel_(kernel) {}

  const std::string& kernel() const noexcept { return kernel_; }

 private:
  std::string kernel_;
};

/// Non-finite activation, loss or gradient inside a model computation.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace hwbd
