#include "ramseg/error.hpp"

namespace ramseg {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile: return "MISSING_FILE";
    case ErrorCode::SchemaViolation: return "SCHEMA_VIOLATION";
    case ErrorCode::DuplicateId: return "DUPLICATE_ID";
    case ErrorCode::ShapeMismatch: return "SHAPE_MISMATCH";
    case ErrorCode::NonFiniteInput: return "NON_FINITE_INPUT";
    case ErrorCode::NonFiniteOutput: return "NON_FINITE_OUTPUT";
    case ErrorCode::DimMismatch: return "DIM_MISMATCH";
    case ErrorCode::NotNormalized: return "NOT_NORMALIZED";
    case ErrorCode::EmptyIndex: return "EMPTY_INDEX";
    case ErrorCode::InvalidK: return "INVALID_K";
    case ErrorCode::IoError: return "IO_ERROR";
    case ErrorCode::CorruptFile: return "CORRUPT_FILE";
    case ErrorCode::VersionUnsupported: return "VERSION_UNSUPPORTED";
    case ErrorCode::CheckpointMissing: return "CHECKPOINT_MISSING";
    case ErrorCode::RuntimeUnavailable: return "RUNTIME_UNAVAILABLE";
    case ErrorCode::NonBinaryMask: return "NON_BINARY_MASK";
    case ErrorCode::EmptyMemoryBank: return "EMPTY_MEMORY_BANK";
    case ErrorCode::UnknownClass: return "UNKNOWN_CLASS";
    case ErrorCode::MissingSample: return "MISSING_SAMPLE";
    case ErrorCode::SubjectLeakage: return "SUBJECT_LEAKAGE";
    case ErrorCode::InvalidArgument: return "INVALID_ARGUMENT";
    case ErrorCode::NotFound: return "NOT_FOUND";
    case ErrorCode::BadImage: return "BAD_IMAGE";
    case ErrorCode::QueueFull: return "QUEUE_FULL";
  }
  return "UNKNOWN";
}

int error_http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::MissingFile:
    case ErrorCode::NotFound:
    case ErrorCode::MissingSample:
      return 404;
    case ErrorCode::DuplicateId:
    case ErrorCode::EmptyIndex:
    case ErrorCode::EmptyMemoryBank:
      return 409;
    case ErrorCode::CheckpointMissing:
    case ErrorCode::RuntimeUnavailable:
    case ErrorCode::QueueFull:
      return 503;
    case ErrorCode::IoError:
    case ErrorCode::CorruptFile:
    case ErrorCode::VersionUnsupported:
    case ErrorCode::NonFiniteOutput:
      return 500;
    default:
      return 400;
  }
}

}  // namespace ramseg
