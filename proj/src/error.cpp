#include "idt/error.hpp"

namespace idt {

std::string_view error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kNoCellFound: return "NoCellFound";
    case ErrorCode::kEmptyClass: return "EmptyClass";
    case ErrorCode::kDivergedTraining: return "DivergedTraining";
    case ErrorCode::kEmptySplit: return "EmptySplit";
    case ErrorCode::kUnknownLayer: return "UnknownLayer";
    case ErrorCode::kOutOfRange: return "OutOfRange";
    case ErrorCode::kMissingVisualization: return "MissingVisualization";
    case ErrorCode::kEmptyNode: return "EmptyNode";
    case ErrorCode::kEmptyTable: return "EmptyTable";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kLayerMismatch: return "LayerMismatch";
    case ErrorCode::kBadFeatureName: return "BadFeatureName";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kBusy: return "Busy";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& detail)
    : std::runtime_error(std::string(error_code_name(code)) + ": " + detail),
      code_(code) {}

}  // namespace idt
