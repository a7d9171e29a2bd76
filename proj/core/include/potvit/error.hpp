#pragma once

#include <stdexcept>
#include <string>

namespace potvit {

// Base for every error the library raises. The CLI maps subclasses to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class RangeError : public Error {
 public:
  using Error::Error;
};

// Malformed or missing configuration, manifest, or artifact.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Two engines disagreed where they are required to be bit-exact.
class CheckFailure : public Error {
 public:
  using Error::Error;
};

// No bit configuration satisfies the requested size budget.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace potvit
