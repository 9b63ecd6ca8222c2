#pragma once

#include <stdexcept>
#include <string>

namespace psd {

enum class ErrorCode {
    invalid_input = 1,
    degenerate_input,
    empty_batch,
    non_finite,
    divergence,
    bad_magic,
    version_mismatch,
    truncated,
    dimension_overflow,
    io,
    config,
};

const char* error_code_name(ErrorCode code) noexcept;

/// Single exception type for the library; the code maps 1:1 onto the C API status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
    if (!condition) {
        throw Error(code, message);
    }
}

} // namespace psd
