#pragma once

#include <stdexcept>
#include <string>

namespace topodiff {

// Base of every error thrown by the library. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration value, unknown config key, bad schedule parameters. Exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Missing or malformed input files, infeasible synthetic generation. Exit code 3.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite loss or gradient during training. Exit code 4.
class NumericalError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class IndexError : public Error {
 public:
  using Error::Error;
};

class ContractError : public Error {
 public:
  using Error::Error;
};

class OracleSizeError : public Error {
 public:
  using Error::Error;
};

}  // namespace topodiff
