#pragma once

#include <stdexcept>
#include <string>

namespace repcmp {

/// Base class for every error raised by the toolkit. `module()` names the
/// component that raised it so the CLI can print module-qualified messages.
class Error : public std::runtime_error {
public:
    Error(std::string module, const std::string& what)
        : std::runtime_error(module + ": " + what), module_(std::move(module)) {}

    const std::string& module() const noexcept { return module_; }

private:
    std::string module_;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Unrecognised file contents (bad magic, version, dtype).
class FormatError : public Error {
public:
    using Error::Error;
};

/// File structurally valid but payload truncated or inconsistent.
class CorruptionError : public Error {
public:
    using Error::Error;
};

class ValidationError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class DomainError : public Error {
public:
    using Error::Error;
};

class BackendError : public Error {
public:
    using Error::Error;
};

/// Session protocol violation (out-of-order submit, finished session, ...).
class StateError : public Error {
public:
    using Error::Error;
};

class NotFoundError : public Error {
public:
    using Error::Error;
};

}  // namespace repcmp
