#ifndef SEMIDYN_ERROR_HPP
#define SEMIDYN_ERROR_HPP

#include <stdexcept>
#include <string>

namespace semidyn {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent user input (files, flags, dimensions).
class InvalidInput : public Error {
public:
  using Error::Error;
};

/// A numerical model failure: singular systems, undefined estimators.
class ModelError : public Error {
public:
  using Error::Error;
};

/// A trajectory left the configured bound during integration.
class DivergenceError : public ModelError {
public:
  DivergenceError(const std::string &curve, double t, double x)
      : ModelError("trajectory diverged for curve '" + curve + "' at t=" + std::to_string(t) +
                   " (|X|=" + std::to_string(x) + ")"),
        curve_(curve) {}

  const std::string &curve() const { return curve_; }

private:
  std::string curve_;
};

} // namespace semidyn

#endif // SEMIDYN_ERROR_HPP
