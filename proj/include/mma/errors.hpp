#pragma once

#include <stdexcept>
#include <string>

namespace mma {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Caller violated a documented precondition (shape, range, length).
class InputContractError : public Error {
 public:
  using Error::Error;
};

class DegenerateEmbeddingError : public Error {
 public:
  using Error::Error;
};

class VocabularyError : public Error {
 public:
  using Error::Error;
};

class ConfigurationError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergenceError : public Error {
 public:
  using Error::Error;
};

class ExternalDependencyError : public Error {
 public:
  using Error::Error;
};

// Malformed or unreadable persisted artifact.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace mma
