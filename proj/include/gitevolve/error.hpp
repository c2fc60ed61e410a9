// Error types shared by every gitevolve module.
//
// Each error class carries the process exit code the CLI reports for it:
// 1 for configuration/argument validation, 2 for bad or missing data,
// 3 for numeric failures (divergence, non-finite values).

#pragma once

#include <stdexcept>
#include <string>

namespace gitevolve {

class Error : public std::runtime_error {
public:
    Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string& what) : Error(what, 1) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what, 2) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(what, 3) {}
};

}  // namespace gitevolve
