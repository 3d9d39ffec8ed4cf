#pragma once

#include <stdexcept>
#include <string>

namespace vitbench {

// Failure categories. The CLI maps each to a distinct process exit code.
enum class ErrorKind {
  Invalid,     // bad arguments or configuration
  Io,          // unreadable/unwritable paths, malformed files
  Numeric,     // non-finite values, divergence
  Degenerate,  // statistically undefined quantity (single-class strata, ...)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what) {
  if (!cond) fail(ErrorKind::Invalid, what);
}

}  // namespace vitbench
