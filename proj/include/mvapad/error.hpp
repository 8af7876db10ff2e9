#pragma once

#include <stdexcept>
#include <string>

namespace mvapad {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input rejected before any work was done (bad shapes, bad files, bad
/// arguments). The CLI maps this family to exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// A documented precondition of an operation was violated.
class ContractError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Checkpoint file that cannot be parsed: bad magic, malformed header, or a
/// payload whose size disagrees with the header.
class CheckpointCorruptError : public FormatError {
 public:
  using FormatError::FormatError;
};

class CheckpointVersionError : public FormatError {
 public:
  using FormatError::FormatError;
};

/// Checkpoint tensors that do not fit the network spec embedded in the file.
class CheckpointShapeError : public DimensionError {
 public:
  using DimensionError::DimensionError;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Failure during numeric work (e.g. a non-finite gradient). Exit code 2.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

}  // namespace mvapad
