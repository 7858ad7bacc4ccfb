#pragma once

#include <stdexcept>
#include <string>

namespace more {

/// Shapes that do not fit together (matmul inner extents, kernel longer than signal, ...).
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A configuration or call parameter outside its valid domain.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Non-finite values where finite ones are required (NaN loss, zero-norm embedding).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A referenced input file does not exist or cannot be opened.
class MissingFileError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A file or config parsed but violates its documented schema.
class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A metric is undefined for the given labels (e.g. AUROC with one class).
class UndefinedMetricError : public ParameterError {
 public:
  using ParameterError::ParameterError;
};

}  // namespace more
