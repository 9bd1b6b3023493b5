#pragma once

#include <stdexcept>
#include <string>

namespace xunc {

// Base of every library error. The CLI maps subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatch between a tensor and what a layer expects.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A tape or gradient set that does not belong to the model it is used with.
class ConsistencyError : public Error {
 public:
  using Error::Error;
};

// Incompatible method/architecture/task combinations and bad config values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss during training or ELBO evaluation.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated files (XTEN, XMDL, Netpbm, CSV).
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace xunc
