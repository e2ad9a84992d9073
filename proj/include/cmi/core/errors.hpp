#pragma once

#include <stdexcept>
#include <string>

namespace cmi {

/// Root of every error raised by the toolkit. Callers that only care about
/// "something in cmi failed" catch this; the subclasses name the condition.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class ShapeMismatch : public Error {
 public:
  using Error::Error;
};

class UnknownArchitecture : public Error {
 public:
  using Error::Error;
};

class CheckpointNotFound : public Error {
 public:
  using Error::Error;
};

class CheckpointMismatch : public Error {
 public:
  using Error::Error;
};

// BN-statistic matching needs a batch variance, which is undefined for N < 2.
class BatchTooSmall : public Error {
 public:
  using Error::Error;
};

class ZeroNormVector : public Error {
 public:
  using Error::Error;
};

class EmptyNegativeSet : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A non-finite objective during synthesis. `diagnostics` is a JSON document
/// describing the step that diverged.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::string diagnostics)
      : Error(what), diagnostics_(std::move(diagnostics)) {}

  const std::string& diagnostics() const noexcept { return diagnostics_; }

 private:
  std::string diagnostics_;
};

}  // namespace cmi
