// Copyright (c) 2026 spprobe contributors.
// Licensed under the Apache License 2.0.

#pragma once

#include <stdexcept>
#include <string>

namespace spprobe {

/// Base class for every error thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or layer shape mismatch; message names the offending operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Non-finite value produced by a numeric operation.
class NumericError : public Error {
public:
    using Error::Error;
};

/// API misuse: backward before forward, missing gradients, etc.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Invalid user-supplied parameter value.
class ParameterError : public Error {
public:
    using Error::Error;
};

/// Training diverged; carries the last epoch that completed with finite loss.
class TrainingError : public Error {
public:
    TrainingError(const std::string& msg, int last_finite_epoch)
        : Error(msg), last_finite_epoch(last_finite_epoch) {}
    int last_finite_epoch;
};

/// Conditioning set too small for a reliable estimate.
class InsufficientDataError : public Error {
public:
    using Error::Error;
};

/// A measure was requested on models whose verified condition does not
/// match the measure's definition.
class ProtocolError : public Error {
public:
    using Error::Error;
};

/// Iterative solver failed to converge.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

/// File format or filesystem failure.
class IoError : public Error {
public:
    using Error::Error;
};

} // namespace spprobe
