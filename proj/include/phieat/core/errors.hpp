#pragma once

#include <stdexcept>
#include <string>

namespace phieat {

enum class ErrorKind {
  invalid_argument,
  pairing_violation,
  io,
  numeric,
  shape,
  config,
  insufficient_variants,
  missing_variant,
  degenerate_batch,
  alignment,
};

inline const char* error_kind_name(ErrorKind k) {
  switch (k) {
    case ErrorKind::invalid_argument: return "invalid-argument";
    case ErrorKind::pairing_violation: return "pairing-violation";
    case ErrorKind::io: return "io";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::shape: return "shape";
    case ErrorKind::config: return "config";
    case ErrorKind::insufficient_variants: return "insufficient-variants";
    case ErrorKind::missing_variant: return "missing-variant";
    case ErrorKind::degenerate_batch: return "degenerate-batch";
    case ErrorKind::alignment: return "alignment";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(error_kind_name(kind)) + ": " + msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind k, const std::string& msg) { throw Error(k, msg); }

inline void require(bool cond, ErrorKind k, const std::string& msg) {
  if (!cond) fail(k, msg);
}

}  // namespace phieat
