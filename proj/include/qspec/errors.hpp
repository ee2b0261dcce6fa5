#pragma once

#include <stdexcept>
#include <string>

namespace qspec {

/// Base class for all library errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid arguments or parameter combinations, rejected before any computation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// A computation could not be completed (count mismatch, precision exhaustion, ...).
class ComputationError : public Error {
 public:
  using Error::Error;
};

/// Band search found a number of bands different from the structural prediction.
class CountMismatchError : public ComputationError {
 public:
  using ComputationError::ComputationError;
};

/// Numerical drift exceeded tolerance; the caller should retry at higher precision.
class PrecisionLossError : public ComputationError {
 public:
  using ComputationError::ComputationError;
};

/// A finite coefficient sequence was exhausted where an infinite one is required.
class CFExhaustedError : public ComputationError {
 public:
  using ComputationError::ComputationError;
};

}  // namespace qspec
