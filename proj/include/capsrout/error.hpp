#pragma once

#include <stdexcept>
#include <string>

namespace capsrout {

enum class ErrorCode {
  kInvalidArgument = 1,
  kDimension,
  kConfig,
  kIo,
  kBadMagic,
  kVersionMismatch,
  kChecksum,
  kTruncated,
  kInvalidRecord,
  kModelKind,
  kNonFinite,
  kEmptySplit,
};

const char* error_code_name(ErrorCode code);

// Every failure surfaced by the library carries one of the codes above so the
// C API can map it without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace capsrout
