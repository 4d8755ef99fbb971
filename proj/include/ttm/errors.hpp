#pragma once

#include <stdexcept>
#include <string>

namespace ttm {

// Argument outside the mathematical domain of an operation (t < 0, g < 0, ...).
struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

// Invalid configuration: bad striding exponent, unknown class, malformed file.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// A field or method lacks a capability the caller asked for
// (no derivative provider, stochastic method used for encoding, ...).
struct CapabilityError : std::logic_error {
    using std::logic_error::logic_error;
};

// NFE budget too small for the requested method; reported as N/A.
struct BudgetError : CapabilityError {
    using CapabilityError::CapabilityError;
};

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Operation called in the wrong state (e.g. multistep without enough history).
struct StateError : std::logic_error {
    using std::logic_error::logic_error;
};

// Non-finite loss or similar numerical breakdown during training.
struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace ttm
