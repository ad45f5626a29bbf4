#pragma once

#include <stdexcept>
#include <string>

namespace dsba {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller violated a documented precondition (shape mismatch, empty input, ...).
class PreconditionError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Dataset file missing or unreadable.
class LoadError : public Error {
 public:
  using Error::Error;
};

class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

/// Labeled data with fewer than two distinct classes.
class DegenerateLabelsError : public Error {
 public:
  using Error::Error;
};

/// A feature row with zero norm reached a cosine similarity.
class NormalizationError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training. `epoch` is 1-based, 0 when unknown.
class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, int epoch) : Error(what), epoch_(epoch) {}
  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

/// A pipeline stage was requested before the stage it consumes has produced output.
class DependencyError : public Error {
 public:
  DependencyError(const std::string& what, std::string stage) : Error(what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace dsba
