// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace r2f {

/// Failure categories. Each maps to a distinct process exit code in the CLI.
enum class ErrorKind {
    usage,
    config,
    convergence,
    incompatible,
    numerical,
    shape,
    io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::usage: return 2;
    case ErrorKind::config: return 3;
    case ErrorKind::convergence: return 4;
    case ErrorKind::incompatible: return 5;
    case ErrorKind::numerical: return 6;
    case ErrorKind::shape: return 7;
    case ErrorKind::io: return 8;
    }
    return 1;
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace r2f
