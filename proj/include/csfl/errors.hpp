// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace csfl {

// Invalid configuration or inputs that should be rejected before any
// simulation work starts. Maps to CLI exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// CSV / config schema violations (missing column, unknown key).
struct SchemaError : ConfigError {
    explicit SchemaError(const std::string& msg) : ConfigError(msg) {}
};

// Malformed data files (empty file, bad cell).
struct DataError : ConfigError {
    explicit DataError(const std::string& msg) : ConfigError(msg) {}
};

// Runtime failures inside a computation. Maps to CLI exit code 3.
struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape mismatch between tensors or parameter sets.
struct DimensionError : ContractError {
    explicit DimensionError(const std::string& msg) : ContractError(msg) {}
};

// Non-finite values where finite math is required.
struct NumericError : ContractError {
    explicit NumericError(const std::string& msg) : ContractError(msg) {}
};

// A training round diverged; carries the offending user id.
struct RoundError : NumericError {
    RoundError(int user, const std::string& msg)
        : NumericError("user " + std::to_string(user) + ": " + msg), user_id(user) {}
    int user_id;
};

// File system failures. Maps to CLI exit code 4.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace csfl
