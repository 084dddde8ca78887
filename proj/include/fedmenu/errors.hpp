#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedmenu {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration: bad hyperparameters, indivisible sizes, empty label sets.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shape mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// An operation produced NaN or Inf.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Malformed sample data (e.g. label id outside {0..M}).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Caller broke an API contract (e.g. AGD output supplied for an unlabeled organ).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Finite-difference oracle could not be evaluated.
class OracleError : public Error {
 public:
  using Error::Error;
};

/// Federation protocol violation (structurally different parameter sets).
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data could not be generated under the requested constraints.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Evaluation precondition failed (missing organ coverage).
class EvaluationError : public Error {
 public:
  using Error::Error;
};

/// File could not be read, written, or parsed.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint does not match the network described by the configuration.
class StructureError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(int round, std::size_t batch, const std::string& detail)
      : Error("training diverged at round " + std::to_string(round) + ", batch " +
              std::to_string(batch) + ": " + detail),
        round_(round),
        batch_(batch) {}

  int round() const noexcept { return round_; }
  std::size_t batch() const noexcept { return batch_; }

 private:
  int round_;
  std::size_t batch_;
};

}  // namespace fedmenu
