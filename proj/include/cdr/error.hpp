#pragma once

#include <stdexcept>
#include <string>

namespace cdr {

// Root of the library's exception hierarchy. The CLI maps each subclass onto
// a process exit code (usage 1, data 2, numerical 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing input data, violated invariants, I/O failures.
class DataError : public Error {
 public:
  using Error::Error;
};

// Non-finite losses or gradients, fit non-convergence.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace cdr
