#pragma once

#include <stdexcept>
#include <string>

namespace taskfuse {

enum class ErrorKind {
  usage,       // bad arguments, enumeration cap exceeded
  format,      // unparseable file, header or schema
  data,        // non-finite or otherwise invalid values
  size,        // too few samples or tasks
  shape,       // inconsistent dimensions
  alignment,   // sample-count mismatch across matrices
  identity,    // duplicate task ids
  membership,  // task not a member of the group
  protocol,    // bundle/manifest mismatch, bad session state
  version,     // session schema version mismatch
  range,       // index out of range
  topology,    // tree violates refinement
  degenerate,  // zero variance, non-positive self-similarity
  numeric,     // non-finite gradient or loss value
  divergence,  // training blew up
  coverage,    // epsilon band not fully covered
  division,    // zero baseline
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

// Process exit codes: 0 ok, 1 usage, 2 data/format, 3 numeric/degenerate.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage:
      return 1;
    case ErrorKind::degenerate:
    case ErrorKind::numeric:
    case ErrorKind::divergence:
    case ErrorKind::division:
      return 3;
    default:
      return 2;
  }
}

}  // namespace taskfuse
