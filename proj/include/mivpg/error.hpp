#pragma once

#include <stdexcept>
#include <string>

namespace mivpg {

// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor shape disagreement; the message names both shapes.
struct ShapeError : Error { using Error::Error; };

// Invalid architecture or hyperparameter configuration.
struct ConfigError : Error { using Error::Error; };

// An operation that needs at least one instance received none.
struct EmptyBagError : Error { using Error::Error; };

// Row/column index outside the valid range.
struct IndexError : Error { using Error::Error; };

// Violated call contract (e.g. backward from a non-scalar).
struct ContractError : Error { using Error::Error; };

// File read/write failures and malformed on-disk data.
struct IoError : Error { using Error::Error; };

// Training diverged or could not proceed.
struct TrainingError : Error { using Error::Error; };

// Synthetic task generation could not satisfy its constraints.
struct GenerationError : Error { using Error::Error; };

}  // namespace mivpg
