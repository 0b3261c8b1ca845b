#pragma once

#include <stdexcept>
#include <string>

namespace groupalign {

// Error taxonomy shared by every module. The CLI maps these onto exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Shapes disagree (matmul inner dims, broadcast, length mismatch).
struct DimensionError : Error {
    using Error::Error;
};

// Lookup outside a table / timestep outside the schedule.
struct IndexError : Error {
    using Error::Error;
};

// API misuse: non-scalar backward, missing gradient, oversize enumeration.
struct ContractError : Error {
    using Error::Error;
};

// Input that is structurally valid but meaningless (all-zero labels,
// zero-norm vector, empty dataset, empty sequence).
struct DegenerateInputError : Error {
    using Error::Error;
};

// NaN/Inf observed in a forward or backward pass. Hard error, exit code 4.
struct NumericalError : Error {
    using Error::Error;
};

// Bad configuration value. Exit code 2.
struct ConfigError : Error {
    using Error::Error;
};

// A required input file (dataset, checkpoint) is absent. Exit code 3.
struct MissingArtifactError : Error {
    using Error::Error;
};

// Generic I/O failure, message carries the path.
struct IoError : Error {
    using Error::Error;
};

}  // namespace groupalign
