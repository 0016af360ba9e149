#pragma once

#include <stdexcept>
#include <string>

namespace fungi {

// Numeric values double as CLI exit codes.
enum class ErrorCode : int {
    internal = 1,
    config = 2,
    data = 3,
    numeric = 4,
};

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorCode::config, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorCode::data, what) {}
};

// Shape or dimensionality disagreement between operands.
class ShapeError : public DataError {
public:
    explicit ShapeError(const std::string& what) : DataError("shape mismatch: " + what) {}
};

// NaN/Inf produced, or a degenerate value (zero norm, zero variance) that has no defined result.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorCode::numeric, what) {}
};

}  // namespace fungi
