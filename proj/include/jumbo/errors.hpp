#pragma once

#include <stdexcept>
#include <string>

namespace jumbo {

// Every failure the library reports derives from Error so callers can map
// categories onto exit codes without string matching.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor extents.
struct ShapeError : Error {
  using Error::Error;
};

/// A caller broke an operation's precondition.
struct ContractError : Error {
  using Error::Error;
};

/// Invalid model, plan, or geometry configuration.
struct ConfigError : Error {
  using Error::Error;
};

/// NaN/Inf produced or consumed.
struct NumericError : Error {
  using Error::Error;
};

/// Malformed or unreadable input data.
struct DataError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

}  // namespace jumbo
