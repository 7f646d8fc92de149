#pragma once

#include <stdexcept>
#include <string>

namespace tsrq {

// Error taxonomy used across the toolkit. The CLI maps these onto process
// exit codes: validation failures (argument/dimension/data) exit 1,
// optimization divergence exits 2, filesystem problems exit 3.

struct ArgumentError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Shape or size mismatch between tensors.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or out-of-range input data (corpus files, containers, codes).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// API used out of order (backward on a consumed tape, merge before harden).
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

// Training or reconstruction diverged (non-finite loss).
struct OptimizationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace tsrq
