#pragma once

#include <stdexcept>
#include <string>

namespace hmtl {

/// Malformed configuration text or an unknown/invalid config value.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A runtime contract was broken (corrupt checkpoint, frozen weights moved, ...).
class InvariantError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dataset schema problems: missing manifest, bad rows, empty dataset.
class SchemaError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace hmtl
