#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace steward {

enum class ErrorCode {
  kInvalidArgument,
  kNotFound,
  kPermissionDenied,
  kPathEscape,
  kAlreadyExists,
  kConflict,
  kFailedPrecondition,
  kCorruptJournal,
  kIntegrity,
  kScriptExhausted,
  kDivergence,
  kTransport,
  kSchema,
  kSpawn,
  kIo,
  kPlanningFailed,
  kCancelled,
  kConfig,
};

std::string_view to_string(ErrorCode code);

// Single exception type for the engine; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace steward
