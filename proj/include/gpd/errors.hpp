#pragma once

#include <stdexcept>
#include <string>

namespace gpd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor extents, channel chains, or layer roles.
struct ShapeError : Error {
  using Error::Error;
};

// NaN/Inf encountered at an operation boundary.
struct NumericError : Error {
  using Error::Error;
};

// Misuse of the gradient tape (non-scalar loss, double backward, ...).
struct AutodiffError : Error {
  using Error::Error;
};

// Malformed checkpoint, dataset, or CSV file.
struct FormatError : Error {
  using Error::Error;
};

// Invalid run configuration, expansion plan, or CLI arguments.
struct ConfigError : Error {
  using Error::Error;
};

}  // namespace gpd
