#pragma once

#include <stdexcept>
#include <string>

namespace candtrack {

// Malformed input files or configuration (CLI exit code 2).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/inf produced during optimization or inference (CLI exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace candtrack
