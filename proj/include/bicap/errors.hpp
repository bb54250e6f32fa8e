#pragma once

#include <stdexcept>
#include <string>

namespace bicap {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape and dimension contract violations.
class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

// Out-of-range hyperparameters and arguments.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Values that would otherwise silently become NaN/Inf, degenerate rows,
// empty reductions.
class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IngestError : public Error {
 public:
  using Error::Error;
};

class SchemaError : public IngestError {
 public:
  using IngestError::IngestError;
};

// Optimizer, schedule and grouping state errors.
class StateError : public Error {
 public:
  using Error::Error;
};

// A checkpoint that does not match the model or input it is applied to.
class MismatchError : public Error {
 public:
  using Error::Error;
};

// A fitting procedure that cannot run on the data it was given.
class TrainingError : public Error {
 public:
  using Error::Error;
};

class ProtocolError : public Error {
 public:
  using Error::Error;
};

}  // namespace bicap
