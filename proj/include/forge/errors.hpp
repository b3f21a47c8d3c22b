#pragma once

#include <stdexcept>
#include <string>

namespace forge {

// Every failure the harness can signal, so callers and tests can branch on
// the kind instead of parsing message text.
enum class ErrorKind {
    io,            // filesystem / OS failure
    format,        // unparseable input (manifest, script, envelope, config)
    integrity,     // knowledge-base referential violation
    not_found,     // unknown key, doc id, file, model id
    conflict,      // stale revision
    taxonomy,      // category outside the fixed L1 index
    security,      // path escape out of a repository root
    state,         // operation illegal in current status (halted repo, double halt)
    protocol,      // malformed provider payload, tool-ordering violation
    comparability, // MinHash signatures with mismatched parameters
    precondition,  // caller violated an operation precondition
    transport,     // network-level failure, retryable
    exhausted,     // retries or script entries used up
    context,       // irreducible context overflow
    execution,     // process spawn failure
    invalid_input, // bad CLI/config/task input
    metric,        // metric not computable on the given data
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message, bool retryable = false)
        : std::runtime_error(std::string(to_string(kind)) + ": " + message),
          kind_(kind),
          retryable_(retryable) {}

    ErrorKind kind() const { return kind_; }
    bool retryable() const { return retryable_; }

private:
    ErrorKind kind_;
    bool retryable_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message, bool retryable = false) {
    throw Error(kind, message, retryable);
}

} // namespace forge
