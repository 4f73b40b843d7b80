#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace osrm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad arguments, shape mismatches, violated invariants. CLI exit code 1.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// File system failures. CLI exit code 2.
class IoError : public Error {
 public:
  using Error::Error;
};

class ConvergenceError : public Error {
 public:
  using Error::Error;
};

class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(std::size_t step, const std::string& what)
      : Error(what), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

}  // namespace osrm
