#pragma once

#include <stdexcept>
#include <string>

namespace fhcure {

/// Raised when input data is structurally unusable (bad CSV cell, missing
/// column, empty dataset, no events below the horizon).
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Raised when a computation produces non-finite values or a matrix fails a
/// required property (e.g. positive definiteness) and cannot proceed.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace fhcure
