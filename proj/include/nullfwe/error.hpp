#pragma once
// Exception types shared by every module. Callers catch nullfwe::Error to
// handle anything the library raises; the subclasses only name the failure.

#include <stdexcept>
#include <string>

namespace nullfwe {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Grids or lengths that must agree do not.
struct DimensionError : Error {
  using Error::Error;
};

/// An argument lies outside the domain of the operation.
struct DomainError : Error {
  using Error::Error;
};

/// A documented precondition does not hold (empty mask, too few samples).
struct PreconditionError : Error {
  using Error::Error;
};

/// Malformed text or header. `field` names the offending entry.
struct ParseError : Error {
  ParseError(std::string field_name, const std::string& what)
      : Error(what), field(std::move(field_name)) {}
  std::string field;
};

/// Payload length or content inconsistent with its header.
struct CorruptionError : Error {
  using Error::Error;
};

/// Singular or rank-deficient design matrix.
struct DesignError : Error {
  using Error::Error;
};

/// Event schedule cannot be placed inside the run.
struct SchedulingError : Error {
  SchedulingError(double required, double available, const std::string& what)
      : Error(what), required_s(required), available_s(available) {}
  double required_s;
  double available_s;
};

/// Configuration key failed validation. `key` is the dotted path.
struct ValidationError : Error {
  ValidationError(std::string key_path, const std::string& what)
      : Error(what), key(std::move(key_path)) {}
  std::string key;
};

/// Iterative fit did not converge. Carries the best parameters seen.
struct FitError : Error {
  FitError(const std::string& what, double a_, double b_, double c_, double residual)
      : Error(what), a(a_), b(b_), c(c_), residual_norm(residual) {}
  double a, b, c;
  double residual_norm;
};

}  // namespace nullfwe
