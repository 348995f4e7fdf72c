#pragma once

#include <stdexcept>
#include <string>

namespace copanet {

// Error taxonomy. The CLI maps these onto process exit codes.

/// Inconsistent shapes, channel counts or network configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// API misuse: backward twice, unknown category, bad flags.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Corrupt or out-of-range input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File system failures.
class IoError : public DataError {
 public:
  using DataError::DataError;
};

/// NaN/Inf produced during training.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace copanet
