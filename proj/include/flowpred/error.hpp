#pragma once

#include <stdexcept>
#include <string>

namespace flowpred {

// Raised for unreadable or malformed inputs (files, manifests, dimension
// mismatches between artifacts). CLI maps this to exit code 2.
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised when tensor/layer shapes do not line up. Treated as a data error
// at the CLI boundary.
struct ShapeError : DataError {
    explicit ShapeError(const std::string& msg) : DataError(msg) {}
};

// Raised when training diverges (NaN/Inf loss). CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace flowpred
