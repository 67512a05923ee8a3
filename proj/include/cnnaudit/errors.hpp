#pragma once

#include <stdexcept>
#include <string>

namespace cnnaudit {

/// Base class for every error raised by the audit library.
class AuditError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input does not match the model's declared shape after preprocessing.
class RejectedInputError : public AuditError {
public:
    using AuditError::AuditError;
};

/// Unknown layer, subgroup, neuron or image id.
class LookupError : public AuditError {
public:
    using AuditError::AuditError;
};

/// Backend cannot provide the requested capability (e.g. gradients).
class CapabilityError : public AuditError {
public:
    using AuditError::AuditError;
};

/// Invalid configuration value or out-of-range argument.
class ConfigError : public AuditError {
public:
    using AuditError::AuditError;
};

/// Data failed an invariant check (duplicate ids, dangling references, ...).
class ValidationError : public AuditError {
public:
    using AuditError::AuditError;
};

class ParseError : public AuditError {
public:
    using AuditError::AuditError;
};

class VersionError : public AuditError {
public:
    using AuditError::AuditError;
};

} // namespace cnnaudit
