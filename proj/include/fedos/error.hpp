#pragma once

#include <stdexcept>
#include <string>

namespace fedos {

/// Base error. `code` is a short machine-readable tag used by the CLI error line.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

class ShapeError : public Error {
public:
    ShapeError(const std::string& where, const std::string& message)
        : Error("shape", where + ": " + message), where_(where) {}

    /// Layer or tensor name that failed the check.
    const std::string& where() const noexcept { return where_; }

private:
    std::string where_;
};

class ValueError : public Error {
public:
    explicit ValueError(const std::string& message) : Error("value", message) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& message) : Error("io", message) {}
};

class ConfigError : public Error {
public:
    ConfigError(const std::string& field, const std::string& message)
        : Error("config", field + ": " + message), field_(field) {}

    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Raised when training diverges (non-finite or exploding loss).
class DivergenceError : public Error {
public:
    DivergenceError(int round, const std::string& message)
        : Error("divergence", "round " + std::to_string(round) + ": " + message), round_(round) {}

    int round() const noexcept { return round_; }

private:
    int round_;
};

} // namespace fedos
