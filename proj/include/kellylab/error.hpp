#pragma once

#include <stdexcept>
#include <string>

namespace kellylab {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid experiment or module configuration. The message names the violated invariant.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Cholesky failed, singular system, matrix logarithm without a valid generator, ...
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Operation called in the wrong phase, e.g. stepping a finished episode.
class LifecycleError : public Error {
public:
    using Error::Error;
};

class FitError : public Error {
public:
    using Error::Error;
};

} // namespace kellylab
