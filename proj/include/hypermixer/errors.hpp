#pragma once

#include <stdexcept>
#include <string>

namespace hmx {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes are incompatible.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A hyperparameter or argument is outside its valid range.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// A fixed-size mixing module was asked to process more tokens than it holds weights for.
class CapacityError : public Error {
public:
    using Error::Error;
};

/// Input data is malformed (bad TSV row, out-of-vocabulary id, unknown label, ...).
class DataError : public Error {
public:
    using Error::Error;
};

/// API misuse, e.g. calling backward on a non-scalar.
class UsageError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Training diverged; carries the epoch at which the loss became non-finite.
class TrainingError : public Error {
public:
    TrainingError(const std::string& what, std::size_t epoch) : Error(what), epoch_(epoch) {}
    std::size_t epoch() const noexcept { return epoch_; }

private:
    std::size_t epoch_;
};

class AnalysisError : public Error {
public:
    using Error::Error;
};

class GenerationError : public Error {
public:
    using Error::Error;
};

/// Configuration document is invalid (unknown key, wrong type, ...).
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace hmx
