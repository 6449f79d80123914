#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mlcvnet {

// Bad argument or shape mismatch: std::invalid_argument, thrown directly.

/// Text-format parse failure; `line()` is 1-based (0 when not line oriented).
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(line ? what + " (line " + std::to_string(line) + ")" : what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class UnsupportedFormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class CorruptCheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DecodeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Config file with unknown keys or bad values.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite gradient handed to the optimizer.
class NonFiniteGradientError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace mlcvnet
