#pragma once

#include <stdexcept>
#include <string>

namespace tryon {

// Base class for all library errors. CLI maps these to exit code 2,
// usage/validation problems to exit code 1.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shapes incompatible with the requested operation.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape error: " + msg) {}
};

// An operation produced NaN/Inf, or was fed non-finite input.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& msg) : Error("numeric error: " + msg) {}
};

// Invalid configuration value detected before any work started.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config error: " + msg) {}
};

// Malformed or inconsistent data (dataset files, class indices, masks).
class DataError : public Error {
public:
    explicit DataError(const std::string& msg) : Error("data error: " + msg) {}
};

// Filesystem / serialization failures.
class IoError : public Error {
public:
    explicit IoError(const std::string& msg) : Error("io error: " + msg) {}
};

// Degenerate geometry (collinear correspondences, empty masks, singular
// homographies).
class GeometryError : public Error {
public:
    explicit GeometryError(const std::string& msg) : Error("geometry error: " + msg) {}
};

} // namespace tryon
