#pragma once

#include <stdexcept>
#include <string>

namespace flatdiff {

// Base class for everything this library throws. The CLI maps subclasses to
// exit codes: ConfigError/UsageError -> 2, NumericError -> 3, InvariantError -> 4.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid configuration values, malformed files, unusable preconditions.
class ConfigError : public Error {
public:
    using Error::Error;
};

// CLI misuse (unknown metric, missing flag).
class UsageError : public Error {
public:
    using Error::Error;
};

// Mismatched ParamVector layouts or tensor shapes.
class LayoutError : public Error {
public:
    using Error::Error;
};

// Out-of-range timestep or index.
class IndexError : public Error {
public:
    using Error::Error;
};

// Non-finite values where finiteness is required (loss, gradient, sampler state).
class NumericError : public Error {
public:
    using Error::Error;
};

// A theory operation was invoked outside the regime its identity is proven in
// (asymmetric delta*W^T, non-positive-definite covariance, relu with
// non-positive pre-activations).
class RegimeError : public Error {
public:
    using Error::Error;
};

// A certified invariant failed (theory-verify bound violations).
class InvariantError : public Error {
public:
    using Error::Error;
};

} // namespace flatdiff
