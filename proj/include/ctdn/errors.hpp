#pragma once

#include <stdexcept>
#include <string>

namespace ctdn {

// Exit-code mapping used by the CLI: 2 configuration/argument error,
// 3 missing prerequisite, 4 numeric failure.
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct MissingPrerequisiteError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ArgumentError(msg);
}

}  // namespace ctdn
