#pragma once

#include <stdexcept>
#include <string>

namespace casecohort {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input data: CSV schema violations, invalid intervals,
// inconsistent sampling indicators. Messages carry the offending line.
class DataFormatError : public Error {
 public:
  using Error::Error;
};

// Evaluation outside a function's admissible domain.
class DomainError : public Error {
 public:
  using Error::Error;
};

// The requested model cannot be identified from the data (collinear or
// otherwise degenerate design); a data problem, not a numerical one.
class IdentifiabilityError : public Error {
 public:
  using Error::Error;
};

// Numerical estimation failures: bad initialization, non-convergence,
// bootstrap collapse.
class FitError : public Error {
 public:
  using Error::Error;
};

// End-of-study calibration could not bracket the target case rate.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

// Unreadable or inconsistent scenario / run configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace casecohort
