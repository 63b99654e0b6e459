#pragma once

#include <stdexcept>
#include <string>

namespace koopsos {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or inconsistent input: dimension mismatches, parse errors,
/// invalid configuration values.
class InputError : public Error {
 public:
  using Error::Error;
};

/// A convex program has no feasible point (for SOS programs: no certificate
/// exists at the chosen degrees).
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Factorization breakdown, iteration cap, or an unverifiable result.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Monomial support of a product exceeds what the Gram form can represent.
class DegreeOverflowError : public InputError {
 public:
  using InputError::InputError;
};

}  // namespace koopsos
