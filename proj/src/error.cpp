#include "stagelm/error.hpp"

namespace stagelm {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kInsufficientMerges: return "insufficient_merges";
    case ErrorCode::kUnknownTokenId: return "unknown_token_id";
    case ErrorCode::kNoSupervisedPositions: return "no_supervised_positions";
    case ErrorCode::kDatasetExhausted: return "dataset_exhausted";
    case ErrorCode::kStageOrder: return "stage_order";
    case ErrorCode::kBadMagic: return "bad_magic";
    case ErrorCode::kVersionMismatch: return "version_mismatch";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kEvalRequiresWholeDocuments: return "eval_requires_whole_documents";
    case ErrorCode::kBucketMismatch: return "bucket_mismatch";
    case ErrorCode::kClientFailure: return "client_failure";
    case ErrorCode::kConfig: return "config";
  }
  return "unknown";
}

}  // namespace stagelm
