#pragma once

#include <stdexcept>
#include <string>

namespace bolmo {

// Base class for every error surfaced by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

// A forward value or gradient became NaN/Inf.
struct NumericError : Error {
    using Error::Error;
};

struct InputError : Error {
    using Error::Error;
};

// A file that should exist could not be opened.
struct NotFoundError : InputError {
    using InputError::InputError;
};

struct FormatError : Error {
    using Error::Error;
};

struct VersionError : FormatError {
    using FormatError::FormatError;
};

struct ChecksumError : FormatError {
    using FormatError::FormatError;
};

struct ConfigError : Error {
    using Error::Error;
};

} // namespace bolmo
