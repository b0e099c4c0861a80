#pragma once

#include <stdexcept>
#include <string>

namespace ov3d {

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  OutOfRange,
  BadMagic,
  VersionMismatch,
  Truncated,
  Io,
  Format,
  Numerical,
  Encoder,
};

const char* to_string(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) fail(code, message);
}

}  // namespace ov3d
