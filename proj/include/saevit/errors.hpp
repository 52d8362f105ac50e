#pragma once

#include <stdexcept>
#include <string>

namespace saevit {

/// Shape or axis mismatch between tensors/ops. Message names the offending axes.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid model/CLI configuration (bad variant, indivisible channels, ...).
struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Invalid runtime input values (out-of-range labels, malformed files, ...).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// API used out of order (e.g. optimizer step without gradients).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Training diverged (NaN loss).
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A verification harness detected a failure (non-finite gradient, ...).
struct VerificationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// File I/O failure (missing file, bad magic, truncated payload).
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace saevit
