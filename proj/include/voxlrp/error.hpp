#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace voxlrp {

// Each value maps to a distinct CLI exit code (see exit_code()).
enum class ErrorCode {
  Io,
  FormatBadMagic,
  FormatTruncated,
  FormatDimOverflow,
  FormatTrailingBytes,
  Schema,
  DimMismatch,
  DuplicateId,
  InvalidArgument,
  Precondition,
  RankDeficient,
  ShapeMismatch,
  Integrity,
  NotFound,
  Undefined,
};

std::string_view to_string(ErrorCode code);

/// Process exit code used by the command-line driver for `code`.
int exit_code(ErrorCode code);

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

}  // namespace voxlrp
