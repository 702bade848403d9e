#pragma once

#include <stdexcept>
#include <string>

namespace mixedray {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad tensor valence, dimension or ordering.
struct ValenceError : Error {
    using Error::Error;
};

// Length or layout mismatch between containers.
struct ShapeError : Error {
    using Error::Error;
};

// Point or parameter outside the admissible domain.
struct DomainError : Error {
    using Error::Error;
};

struct DegeneratePairingError : Error {
    using Error::Error;
};

struct TrappedRayError : Error {
    using Error::Error;
};

struct RejectedRayError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct NumericalError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

}  // namespace mixedray
