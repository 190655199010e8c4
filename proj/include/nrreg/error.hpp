#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace nrreg {

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed input file. `line()` is 1-based, 0 when no line applies.
class ParseError : public Error {
public:
    ParseError(const std::string& path, std::size_t line, const std::string& what)
        : Error(path + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
          line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// The X-subproblem matrix has a zero or negative pivot.
class SingularSystemError : public Error {
public:
    SingularSystemError(const std::string& what, std::vector<int> blocks)
        : Error(what), blocks_(std::move(blocks)) {}

    /// Vertex blocks (0-based) whose rows produced non-positive pivots.
    const std::vector<int>& blocks() const noexcept { return blocks_; }

private:
    std::vector<int> blocks_;
};

class SolverError : public Error {
public:
    using Error::Error;
};

}  // namespace nrreg
