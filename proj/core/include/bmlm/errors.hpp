#pragma once

#include <stdexcept>
#include <string>

namespace bmlm {

// Error taxonomy. Every failure surfaced by the library derives from Error,
// so callers can catch one type; the CLI maps these to exit code 1 and
// UsageError to exit code 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration value (violated invariant on a config struct).
struct ConfigError : Error { using Error::Error; };

// Unreadable/empty/missing input (files, corpora).
struct InputError : Error { using Error::Error; };

// Tensor shape disagreement.
struct ShapeError : Error { using Error::Error; };

// Value outside its domain (unknown token id, target id >= vocab, ...).
struct DomainError : Error { using Error::Error; };

// API precondition broken by the caller (non-scalar loss, step > total, ...).
struct ContractError : Error { using Error::Error; };

// Dataset content violates its schema.
struct DataError : Error { using Error::Error; };

// Malformed record; carries the 1-based line number.
struct ParseError : DataError {
    ParseError(const std::string& msg, std::size_t line)
        : DataError(msg + " (line " + std::to_string(line) + ")"), line_number(line) {}
    std::size_t line_number;
};

// Corrupt or truncated serialized artifact (checkpoint hash mismatch, ...).
struct IntegrityError : Error { using Error::Error; };

// Serialized artifact written by an incompatible format version.
struct VersionError : Error { using Error::Error; };

// Bad command line. Only thrown by the CLI layer.
struct UsageError : Error { using Error::Error; };

}  // namespace bmlm
