#pragma once

#include <stdexcept>
#include <string>

namespace stagelm {

enum class ErrorCode {
  kInvalidArgument,
  kIo,
  kParse,
  kInsufficientMerges,
  kUnknownTokenId,
  kNoSupervisedPositions,
  kDatasetExhausted,
  kStageOrder,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kShapeMismatch,
  kEvalRequiresWholeDocuments,
  kBucketMismatch,
  kClientFailure,
  kConfig,
};

const char* to_string(ErrorCode code);

// Every error carries the module that raised it so the CLI can surface it
// verbatim with a prefix.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, std::string module, const std::string& message)
      : std::runtime_error(message), code_(code), module_(std::move(module)) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& module() const noexcept { return module_; }

 private:
  ErrorCode code_;
  std::string module_;
};

}  // namespace stagelm
