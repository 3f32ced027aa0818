#pragma once

#include <stdexcept>
#include <string>

namespace nprompt {

// Root of the library's exception hierarchy. Standard library exceptions
// (std::length_error, std::domain_error, std::invalid_argument) are used
// where their meaning is exact.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file or text (model files, constraint specs, taxonomy).
class ParseError : public Error {
 public:
  using Error::Error;
};

// A constraint spec that cannot be compiled against a vocabulary.
class CompileError : public Error {
 public:
  using Error::Error;
};

// User-supplied selections or requests that fail validation.
class ValidationError : public Error {
 public:
  using Error::Error;
};

// No hypothesis can satisfy the constraints (masking removed every path,
// or the request is self-contradictory).
class UnsatisfiableError : public Error {
 public:
  using Error::Error;
};

// External backend failed after exhausting its retry budget.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, int attempts)
      : Error(what), attempts_(attempts) {}
  int attempts() const noexcept { return attempts_; }

 private:
  int attempts_;
};

// A scorer could not score one of the images of a pair.
class ScorerError : public Error {
 public:
  using Error::Error;
};

// Numerical failure during training (non-finite gradient and the like).
class TrainingError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace nprompt
