#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace exray {

enum class ErrorCode {
  shape_mismatch,
  non_differentiable,
  bad_magic,
  checksum_mismatch,
  shape_inference,
  validation,
  insufficient_samples,
  precondition,
  io,
  forge_failure,
  manifest_mismatch,
  invalid_config,
};

std::string_view error_code_name(ErrorCode code) noexcept;

/// Single exception type for the library; `code()` distinguishes failure classes.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace exray
