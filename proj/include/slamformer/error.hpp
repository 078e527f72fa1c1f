#pragma once

#include <stdexcept>
#include <string>

namespace slamformer {

// Error taxonomy shared across the library. The CLI maps kinds onto
// process exit codes (config -> 2, io -> 3, everything else -> 4).
enum class ErrorKind {
    config,      // bad configuration or arguments
    dimension,   // tensor/shape mismatch
    contract,    // violated call contract or invariant
    numeric,     // non-finite values or failed numeric evaluation
    estimation,  // degenerate estimation problem (no valid elements, rank loss)
    ordering,    // out-of-order sequence operation
    bounds,      // index or range violation
    io,          // filesystem or parse failure
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

    static Error config(const std::string& m) { return {ErrorKind::config, m}; }
    static Error dimension(const std::string& m) { return {ErrorKind::dimension, m}; }
    static Error contract(const std::string& m) { return {ErrorKind::contract, m}; }
    static Error numeric(const std::string& m) { return {ErrorKind::numeric, m}; }
    static Error estimation(const std::string& m) { return {ErrorKind::estimation, m}; }
    static Error ordering(const std::string& m) { return {ErrorKind::ordering, m}; }
    static Error bounds(const std::string& m) { return {ErrorKind::bounds, m}; }
    static Error io(const std::string& m) { return {ErrorKind::io, m}; }

private:
    ErrorKind kind_;
};

inline int exit_code_for(const Error& e) {
    switch (e.kind()) {
        case ErrorKind::config: return 2;
        case ErrorKind::io: return 3;
        default: return 4;
    }
}

}  // namespace slamformer
