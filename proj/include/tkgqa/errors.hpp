#pragma once

#include <stdexcept>
#include <string>

namespace tkgqa {

// Error taxonomy mirrored by the CLI exit codes: usage 1, data 2, numeric 3.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape conformance violations; message names the offending shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tkgqa
