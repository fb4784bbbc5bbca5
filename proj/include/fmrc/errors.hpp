#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fmrc {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape, range or precondition violation by the caller.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Potential evaluated where its gradient is undefined (x1 = x2 = 0 for the ring).
class SingularPoint : public Error {
 public:
  using Error::Error;
};

class BlowUp : public Error {
 public:
  BlowUp(std::int64_t step, const std::string& what)
      : Error("trajectory blow-up at step " + std::to_string(step) + ": " + what), step_(step) {}
  std::int64_t step() const { return step_; }

 private:
  std::int64_t step_;
};

class NotInImage : public Error {
 public:
  using Error::Error;
};

class UnsupportedPrimitive : public Error {
 public:
  using Error::Error;
};

// Non-finite loss/gradient/state. Carries a free-form diagnostic payload (JSON text).
class NumericalFailure : public Error {
 public:
  NumericalFailure(const std::string& what, std::string diagnostics = {})
      : Error(what), diagnostics_(std::move(diagnostics)) {}
  const std::string& diagnostics() const { return diagnostics_; }

 private:
  std::string diagnostics_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fmrc
