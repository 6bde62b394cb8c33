#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace idt {

enum class ErrorCode {
  kNoCellFound,
  kEmptyClass,
  kDivergedTraining,
  kEmptySplit,
  kUnknownLayer,
  kOutOfRange,
  kMissingVisualization,
  kEmptyNode,
  kEmptyTable,
  kDimensionMismatch,
  kLayerMismatch,
  kBadFeatureName,
  kIo,
  kInvalidArgument,
  kBusy,
};

std::string_view error_code_name(ErrorCode code);

// All toolkit failures surface as idt::Error; the code identifies the
// contract violation and what() carries "<CodeName>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail);

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace idt
