#pragma once

#include <stdexcept>
#include <string>

namespace mpcal {

// Exception hierarchy. The CLI maps each kind to a distinct exit code.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

// Bad or insufficient data: unreadable curves, failed feature extraction,
// design ill-posedness.
class DataError : public Error {
 public:
  using Error::Error;
};

// A nonlinear iteration did not converge (lateral equilibrium, pressure
// search, coupled solve).
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpcal
