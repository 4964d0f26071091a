#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace amess {

enum class ErrorCode {
  InvalidInput,  // precondition violated by the caller
  Validation,    // malformed data file or configuration
  Io,            // file could not be opened, read or written
  Divergence,    // non-finite value during training
};

std::string_view to_string(ErrorCode code);

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

inline void require(bool condition, const std::string& message) {
  if (!condition) fail(ErrorCode::InvalidInput, message);
}

}  // namespace amess
