#pragma once

#include <stdexcept>
#include <string>

namespace coocdyn {

/// Raised when a configuration or request cannot be honored (bad sizes, bad flags).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for malformed inputs: empty datasets, unparsable files, unknown identifiers.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a NaN or infinity shows up in a forward pass or a gradient.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace coocdyn
