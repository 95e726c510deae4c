#pragma once

#include <stdexcept>

namespace poisonlab {

// Error taxonomy. The CLI maps ConfigError to exit 2 and NumericError
// (incl. subclasses) to exit 3; everything else exits 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or violated numeric preconditions.
struct NumericError : Error {
  using Error::Error;
};

// A vector that is not a probability distribution.
struct DistributionError : NumericError {
  using NumericError::NumericError;
};

// Incompatible matrix/vector dimensions.
struct ShapeError : Error {
  using Error::Error;
};

// Dataset-level problems: too small, unstratifiable, insufficient labels.
struct DataError : Error {
  using Error::Error;
};

// Bad configuration files, unknown keys, invalid CLI usage.
struct ConfigError : Error {
  using Error::Error;
};

// File I/O failures.
struct IoError : Error {
  using Error::Error;
};

// Distinct ATF load failures.
struct AtfMagicError : IoError {
  using IoError::IoError;
};
struct AtfTruncatedError : IoError {
  using IoError::IoError;
};
struct AtfDimError : IoError {
  using IoError::IoError;
};

}  // namespace poisonlab
