#pragma once

#include <stdexcept>
#include <string>

namespace fidlab {

// Error taxonomy used across the library. The CLI maps these onto exit codes:
// ConfigError -> 2, DataError -> 3, NumericError -> 4, everything else -> 1.

// Malformed or inconsistent configuration (unknown keys, bad values).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing/invalid input data: unreadable corpus, insufficient pools, bad paths.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values where finite ones are required (NaN loss/gradient aborts).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller-supplied hook or component broke its contract
// (e.g. an attention transform returning a non-normalized row).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace fidlab
