#pragma once

#include <stdexcept>
#include <string>

namespace moaserve {

// Invalid configuration, malformed input, or a violated precondition.
// The CLI maps this to exit code 2.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Failure while executing a run (backend, provider, transport, I/O).
// The CLI maps this to exit code 3.
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Embedding-provider failure with a machine-readable kind so callers can
// distinguish transport errors from configuration problems.
class ProviderError : public RunError {
 public:
  enum class Kind { Transport, MissingCredentials, BadResponse };

  ProviderError(Kind kind, const std::string& what) : RunError(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

}  // namespace moaserve
