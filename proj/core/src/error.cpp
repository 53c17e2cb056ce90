// SPDX-License-Identifier: Apache-2.0
#include "sfmc/error.hpp"

namespace sfmc {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNonPositiveDepth: return "NonPositiveDepth";
    case ErrorCode::kNearSingularRotation: return "NearSingularRotation";
    case ErrorCode::kShapeMismatch: return "ShapeMismatch";
    case ErrorCode::kBackwardOnDetached: return "BackwardOnDetached";
    case ErrorCode::kNonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::kResolutionError: return "ResolutionError";
    case ErrorCode::kNeedMultipleViews: return "NeedMultipleViews";
    case ErrorCode::kDegenerateGeometry: return "DegenerateGeometry";
    case ErrorCode::kConfigError: return "ConfigError";
    case ErrorCode::kEmptySupervision: return "EmptySupervision";
    case ErrorCode::kInvalidConfig: return "InvalidConfig";
    case ErrorCode::kRefusingOverwrite: return "RefusingOverwrite";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kEmptyDataset: return "EmptyDataset";
    case ErrorCode::kNonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::kEmptyInput: return "EmptyInput";
    case ErrorCode::kCheckpointMismatch: return "CheckpointMismatch";
  }
  return "Unknown";
}

}  // namespace sfmc
