#pragma once

#include <stdexcept>
#include <string>

namespace ecgsynth {

// Process exit codes shared by the CLI and the pipeline runner.
enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitData = 3,
    kExitNumeric = 4,
};

/// Bad run configuration: unknown keys, invalid values, unusable flags.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent input data (files, shapes, annotations).
class DataError : public std::runtime_error {
public:
    explicit DataError(const std::string& what) : std::runtime_error(what) {}
};

/// Numeric failure: divergence, non-finite values, domain violations.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace ecgsynth
