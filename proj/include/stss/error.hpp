#pragma once

#include <stdexcept>
#include <string>

namespace stss {

/// Invalid arguments, inconsistent shapes or malformed configuration.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Factorization failures and non-finite intermediate results.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// File-system or parse failures while reading/writing artifacts.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace stss
