#pragma once

#include <stdexcept>
#include <string>

namespace redec {

// Error taxonomy shared by the library and the CLI exit-code mapping:
//   usage/config -> 1, data/format/io -> 2, numerical -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Caller broke an API precondition (shape mismatch, stale indices, ...).
struct ContractError : Error {
    using Error::Error;
};

// A configuration value is unusable (non-integral conv output, bad rate, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Input data is malformed (label out of range, clip too short, ...).
struct DataError : Error {
    using Error::Error;
};

// A persisted file does not match its declared format.
struct FormatError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct UsageError : Error {
    using Error::Error;
};

// Training divergence or a failed finite-difference check.
struct NumericError : Error {
    using Error::Error;
};

// Synthetic generator could not place a sample after bounded retries.
struct GenerationError : Error {
    using Error::Error;
};

}  // namespace redec
