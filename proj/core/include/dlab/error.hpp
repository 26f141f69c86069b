#pragma once

#include <stdexcept>
#include <string>

namespace dlab {

// Error taxonomy. The CLI maps these onto process exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4.

/// Violated precondition or API contract (programming error on the caller side).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Tensor extents do not line up for the requested operation.
class DimensionError : public ContractError {
 public:
  using ContractError::ContractError;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or missing input data (files, token ids, records).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// NaN/Inf or a value outside an operation's numeric domain.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace dlab
