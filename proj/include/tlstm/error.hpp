#pragma once

#include <stdexcept>
#include <string>

namespace tlstm {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input does not follow the documented layout (missing column, bad header, wrong dimension).
class SchemaError : public Error {
public:
    using Error::Error;
};

/// Value outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

class OrderingError : public Error {
public:
    using Error::Error;
};

/// Incompatible tensor or parameter shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A NaN or infinity appeared in a computation.
class NumericError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// A model or standardizer was used before being fitted or loaded.
class StateError : public Error {
public:
    using Error::Error;
};

} // namespace tlstm
