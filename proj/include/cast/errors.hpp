#pragma once

#include <stdexcept>
#include <string>

namespace cast {

// Root of every error the library throws. Subclasses map onto the CLI exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Array shapes that do not compose.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Caller passed data outside an operation's domain.
class InputError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration (model, dataset, training or experiment).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// NaN/Inf in a loss or gradient.
class NumericError : public Error {
 public:
  using Error::Error;
};

// API misuse, e.g. calling backward on a non-scalar.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Checksums or provenance do not match.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

}  // namespace cast
