#include "exray/error.hpp"

namespace exray {

std::string_view error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::non_differentiable: return "non_differentiable";
    case ErrorCode::bad_magic: return "bad_magic";
    case ErrorCode::checksum_mismatch: return "checksum_mismatch";
    case ErrorCode::shape_inference: return "shape_inference";
    case ErrorCode::validation: return "validation";
    case ErrorCode::insufficient_samples: return "insufficient_samples";
    case ErrorCode::precondition: return "precondition";
    case ErrorCode::io: return "io";
    case ErrorCode::forge_failure: return "forge_failure";
    case ErrorCode::manifest_mismatch: return "manifest_mismatch";
    case ErrorCode::invalid_config: return "invalid_config";
  }
  return "unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

}  // namespace exray
