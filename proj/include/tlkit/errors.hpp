#pragma once

#include <stdexcept>
#include <string>

namespace tlkit {

// Shape/rank disagreements between tensors or layers.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid model/dataset/training configuration (bad field values, indivisible
// geometry, unknown JSON keys). CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// API misuse: a contract violated at call time (non-scalar loss, missing
// tokenizer maps, ...).
class ContractError : public std::runtime_error {
public:
    explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed or incompatible checkpoint archives.
class CheckpointError : public std::runtime_error {
public:
    explicit CheckpointError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite values during training. CLI maps this to exit code 3.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// File system failures (unreadable dataset, unwritable output path).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace tlkit
