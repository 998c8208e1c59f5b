// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace kasp {

/// Tensor extents do not agree for the requested operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller-side precondition was violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// A configuration value is missing, unknown or out of range. `path()` names
/// the offending field (e.g. "train.steps").
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)), message_(what) {}
  const std::string& path() const noexcept { return path_; }
  const std::string& message() const noexcept { return message_; }
  /// Same error with `prefix.` prepended to the path.
  ConfigError nested(const std::string& prefix) const { return {prefix + "." + path_, message_}; }

 private:
  std::string path_;
  std::string message_;
};

/// Bad model input, e.g. a token id outside the vocabulary.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Training diverged. `step()` is the optimizer step at which it was detected.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(long step, const std::string& what)
      : std::runtime_error("step " + std::to_string(step) + ": " + what), step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CheckpointVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

}  // namespace kasp
