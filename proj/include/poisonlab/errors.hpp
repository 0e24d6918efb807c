#pragma once

#include <stdexcept>
#include <string>

namespace poisonlab {

// Every failure the library raises on purpose carries one of these kinds.
// The CLI maps kinds to exit codes: bad inputs (config/usage/format/
// validation/budget/capability) exit 2, numeric failures during training or
// optimization (numeric/training_diverged/degenerate_gradient) exit 3,
// everything else (io/internal) exits 1.
enum class ErrorKind {
  config,              // malformed or inconsistent configuration
  usage,               // API misuse (bad shapes, empty inputs, ...)
  format,              // unreadable or corrupt file contents
  validation,          // data fails its documented contract (range, labels)
  budget,              // request exceeds what the data can supply
  capability,          // operation not supported for this op/layer
  numeric,             // non-finite values where finite ones are required
  degenerate_gradient, // gradient too small for a direction to exist
  training_diverged,   // optimizer left the representable regime
  clean_label_violation, // labels differ from the recorded clean labels
  io,                  // filesystem trouble
  internal,            // broken internal invariant (a bug, not user error)
};

inline const char* to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::usage: return "usage";
    case ErrorKind::format: return "format";
    case ErrorKind::validation: return "validation";
    case ErrorKind::budget: return "budget";
    case ErrorKind::capability: return "capability";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::degenerate_gradient: return "degenerate-gradient";
    case ErrorKind::training_diverged: return "training-diverged";
    case ErrorKind::clean_label_violation: return "clean-label-violation";
    case ErrorKind::io: return "io";
    case ErrorKind::internal: return "internal";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg),
        kind_(kind) {}

  ErrorKind kind() const { return kind_; }

  // Exit code the CLI should use for this kind.
  int exit_code() const {
    switch (kind_) {
      case ErrorKind::config:
      case ErrorKind::usage:
      case ErrorKind::format:
      case ErrorKind::validation:
      case ErrorKind::budget:
      case ErrorKind::capability:
        return 2;
      case ErrorKind::numeric:
      case ErrorKind::degenerate_gradient:
      case ErrorKind::training_diverged:
        return 3;
      default:
        return 1;
    }
  }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

// Internal sanity checks. These fire on library bugs, never on user input.
inline void check_internal(bool cond, const std::string& msg) {
  if (!cond) fail(ErrorKind::internal, msg);
}

}  // namespace poisonlab
