#pragma once

#include <stdexcept>
#include <string>

namespace spaq {

enum class ErrorCode {
  kShapeMismatch,
  kDtypeMismatch,
  kMissingParameter,
  kInvalidGraph,
  kUnknownModel,
  kInvalidArgument,
  kTapeMismatch,
  kInfeasibleBudget,
  kDegenerateSensitivity,
  kDivergence,
  kMissingRecord,
  kBadMagic,
  kUnsupportedVersion,
  kTruncated,
  kOffsetOverlap,
  kMalformedFile,
  kIo,
  kDegenerateAlignment,
  kParse,
};

const char* to_string(ErrorCode code);

/// Library-wide exception. `code()` distinguishes failure classes that
/// callers (and tests) need to tell apart.
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

}  // namespace spaq
