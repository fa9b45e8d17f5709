#pragma once

#include <stdexcept>
#include <string>

namespace camoforge {

// Invalid argument values (bad tau, bad flag combination, ...).
struct ParameterError : std::invalid_argument {
    explicit ParameterError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Array/tensor dimensions that cannot be combined.
struct ShapeError : std::invalid_argument {
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A call that violates an API precondition (mismatched mesh/topology,
// missing palette, non-scalar backward seed, ...).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

struct TopologyError : std::invalid_argument {
    explicit TopologyError(const std::string& msg) : std::invalid_argument(msg) {}
};

// Input data that is technically well-formed but unusable (fewer distinct
// pixels than clusters, all-empty validation set, ...).
struct DegenerateInputError : std::runtime_error {
    explicit DegenerateInputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite value produced by a tensor operation (overflow, log of zero, ...).
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    explicit TrainingError(const std::string& msg) : std::runtime_error(msg) {}
};

struct AttackError : std::runtime_error {
    explicit AttackError(const std::string& msg) : std::runtime_error(msg) {}
};

struct PlacementError : std::runtime_error {
    explicit PlacementError(const std::string& msg) : std::runtime_error(msg) {}
};

struct CalibrationError : std::runtime_error {
    explicit CalibrationError(const std::string& msg) : std::runtime_error(msg) {}
};

// Raised instead of silently reporting 0 when a ratio metric has an empty
// denominator.
struct UndefinedMetricError : std::runtime_error {
    explicit UndefinedMetricError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// CLI-level misuse; maps to exit code 2.
struct UsageError : std::invalid_argument {
    explicit UsageError(const std::string& msg) : std::invalid_argument(msg) {}
};

}  // namespace camoforge
