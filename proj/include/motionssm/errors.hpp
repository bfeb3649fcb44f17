#pragma once

#include <stdexcept>
#include <string>

namespace motionssm {

/// Shapes of inputs do not agree with each other or with the model.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A computation broke down numerically (non-PSD covariance, NaN objective, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller-side precondition was violated (empty dataset, sequence too short, ...).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Malformed file or text input.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace motionssm
