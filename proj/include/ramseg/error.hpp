#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ramseg {

enum class ErrorCode {
  MissingFile,
  SchemaViolation,
  DuplicateId,
  ShapeMismatch,
  NonFiniteInput,
  NonFiniteOutput,
  DimMismatch,
  NotNormalized,
  EmptyIndex,
  InvalidK,
  IoError,
  CorruptFile,
  VersionUnsupported,
  CheckpointMissing,
  RuntimeUnavailable,
  NonBinaryMask,
  EmptyMemoryBank,
  UnknownClass,
  MissingSample,
  SubjectLeakage,
  InvalidArgument,
  NotFound,
  BadImage,
  QueueFull,
};

// Machine-readable code, e.g. "EMPTY_INDEX".
std::string_view error_code_name(ErrorCode code);

// HTTP status the service answers with for this code.
int error_http_status(ErrorCode code);

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

}  // namespace ramseg
