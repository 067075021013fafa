#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace orchestra {

/// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed textual input (spec strings, files). Carries the offending span when known.
class ParseError : public Error {
public:
    ParseError(const std::string& what, std::size_t offset = 0, std::size_t length = 0)
        : Error(what), offset_(offset), length_(length) {}

    std::size_t offset() const noexcept { return offset_; }
    std::size_t length() const noexcept { return length_; }

private:
    std::size_t offset_;
    std::size_t length_;
};

/// Invalid configuration: bad parameters, mismatched corpus/codebook, forbidden combinations.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A caller broke an operation's precondition (e.g. asking for the context of a STUDENT turn).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Transport failure after the retry budget was exhausted.
class TransportError : public Error {
public:
    using Error::Error;
};

/// Non-retryable rejection from a remote endpoint (401/403 and other 4xx).
class BackendRejected : public Error {
public:
    BackendRejected(const std::string& what, int status) : Error(what), status_(status) {}
    int status() const noexcept { return status_; }

private:
    int status_;
};

/// Persisted state does not match what it claims to belong to.
class DigestMismatch : public Error {
public:
    using Error::Error;
};

/// Adjudication state errors (unknown item, conflicting decision, pending items).
class AdjudicationError : public Error {
public:
    enum class Kind { UnknownItem, Conflict, Incomplete, Invalid };

    AdjudicationError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

}  // namespace orchestra
