#pragma once

#include <stdexcept>
#include <string>

namespace probanet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor shapes or channel counts do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// An argument lies outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// A computation produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

/// The sampler found no candidates to draw from.
class EmptyPoolError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration, optionally tagged with the offending line.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what, int line = 0)
        : Error(line > 0 ? "line " + std::to_string(line) + ": " + what : what), line_(line) {}

    int line() const noexcept { return line_; }

private:
    int line_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace probanet
