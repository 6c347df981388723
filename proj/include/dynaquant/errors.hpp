#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace dynaquant {

/// Operand shapes do not conform to an op's rules.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A hyperparameter is outside its valid domain (dropout p, temperature, beta...).
class ParameterError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A caller broke an API precondition (non-scalar backward root, bad custom gradient...).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string key, const std::string& what)
        : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}

    const std::string& key() const noexcept { return key_; }

private:
    std::string key_;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Corrupt or truncated checkpoint. `offset` is the byte position where reading failed.
class IntegrityError : public std::runtime_error {
public:
    IntegrityError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// A checkpoint written by an incompatible format version.
class VersionError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A checkpoint whose configuration differs from the one the caller expects.
class ConfigMismatchError : public ConfigError {
public:
    using ConfigError::ConfigError;
};

}  // namespace dynaquant
