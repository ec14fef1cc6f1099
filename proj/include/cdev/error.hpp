#pragma once

#include <stdexcept>
#include <string>

namespace cdev {

/// Invalid parameters or configuration values (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Input data violating a precondition: empty clips, NaNs, bad grids (exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Unsupported or malformed file contents (exit code 3).
class FormatError : public DataError {
 public:
  using DataError::DataError;
};

/// Filesystem failures and truncated files (exit code 3).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cdev
