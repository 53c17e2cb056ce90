// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sfmc {

enum class ErrorCode {
  kNonPositiveDepth,
  kNearSingularRotation,
  kShapeMismatch,
  kBackwardOnDetached,
  kNonFiniteGradient,
  kResolutionError,
  kNeedMultipleViews,
  kDegenerateGeometry,
  kConfigError,
  kEmptySupervision,
  kInvalidConfig,
  kRefusingOverwrite,
  kIoError,
  kEmptyDataset,
  kNonFiniteLoss,
  kEmptyInput,
  kCheckpointMismatch,
};

std::string_view to_string(ErrorCode code);

/// Library-wide exception. The code is stable; the message carries context
/// (shapes, paths, parameter names).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace sfmc
