#pragma once

#include <stdexcept>
#include <string>

namespace tweedie_avb {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A distribution parameter violated its domain (non-finite, out of range).
class InvalidParameter : public Error {
 public:
  using Error::Error;
};

/// A function was evaluated outside its mathematical domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

/// Malformed input data (bad CSV cell, missing column, negative response).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Predictions carry no ranking information (e.g. all zero).
class DegeneratePrediction : public Error {
 public:
  using Error::Error;
};

class NonConvergence : public Error {
 public:
  NonConvergence(const std::string& what, double last_bound)
      : Error(what), last_bound_(last_bound) {}
  double last_bound() const noexcept { return last_bound_; }

 private:
  double last_bound_;
};

/// Observation-level failure, e.g. exp(eta) overflow for row `index`.
class ObservationError : public Error {
 public:
  ObservationError(const std::string& what, std::size_t index)
      : Error(what), index_(index) {}
  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Optimizer refused a step because a gradient component was not finite.
class NonFiniteGradient : public Error {
 public:
  NonFiniteGradient(const std::string& parameter, double value)
      : Error("non-finite gradient for parameter '" + parameter +
              "': " + std::to_string(value)),
        parameter_(parameter),
        value_(value) {}
  const std::string& parameter() const noexcept { return parameter_; }
  double value() const noexcept { return value_; }

 private:
  std::string parameter_;
  double value_;
};

/// Training produced a non-finite loss and was stopped.
class NumericalAbort : public Error {
 public:
  NumericalAbort(const std::string& what, long step)
      : Error(what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

}  // namespace tweedie_avb
