#pragma once

#include <stdexcept>
#include <string>

namespace dpclip {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad invocation or configuration; maps to CLI exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

class ConfigError : public UsageError {
public:
    using UsageError::UsageError;
};

// Missing/unreadable/malformed input data; CLI exit code 2.
class DataError : public Error {
public:
    using Error::Error;
};

class LoadError : public DataError {
public:
    using DataError::DataError;
};

// Tensor shape disagreement between components.
class ShapeError : public Error {
public:
    using Error::Error;
};

// Non-finite or degenerate numeric state; CLI exit code 3.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace dpclip
