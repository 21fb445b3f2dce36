#pragma once

#include <stdexcept>
#include <string>

namespace sdl {

enum class ErrorKind {
  Shape,
  InvalidArgument,
  Data,
  Io,
  Numeric,
};

// All library failures are reported through this exception. The kind drives
// the CLI exit code (Data/Io -> 3, Numeric -> 4, everything else -> 2).
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Data:
    case ErrorKind::Io:
      return 3;
    case ErrorKind::Numeric:
      return 4;
    default:
      return 2;
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool ok, ErrorKind kind, const std::string& what) {
  if (!ok) throw Error(kind, what);
}

}  // namespace sdl
