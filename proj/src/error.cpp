#include "voxlrp/error.hpp"

namespace voxlrp {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io: return "io";
    case ErrorCode::FormatBadMagic: return "format.bad_magic";
    case ErrorCode::FormatTruncated: return "format.truncated";
    case ErrorCode::FormatDimOverflow: return "format.dim_overflow";
    case ErrorCode::FormatTrailingBytes: return "format.trailing_bytes";
    case ErrorCode::Schema: return "schema";
    case ErrorCode::DimMismatch: return "dim_mismatch";
    case ErrorCode::DuplicateId: return "duplicate_id";
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::Precondition: return "precondition";
    case ErrorCode::RankDeficient: return "rank_deficient";
    case ErrorCode::ShapeMismatch: return "shape_mismatch";
    case ErrorCode::Integrity: return "integrity";
    case ErrorCode::NotFound: return "not_found";
    case ErrorCode::Undefined: return "undefined";
  }
  return "unknown";
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::Io: return 10;
    case ErrorCode::FormatBadMagic: return 11;
    case ErrorCode::FormatTruncated: return 12;
    case ErrorCode::FormatDimOverflow: return 13;
    case ErrorCode::FormatTrailingBytes: return 14;
    case ErrorCode::Schema: return 20;
    case ErrorCode::DimMismatch: return 21;
    case ErrorCode::DuplicateId: return 22;
    case ErrorCode::InvalidArgument: return 30;
    case ErrorCode::Precondition: return 31;
    case ErrorCode::RankDeficient: return 32;
    case ErrorCode::ShapeMismatch: return 33;
    case ErrorCode::Integrity: return 40;
    case ErrorCode::NotFound: return 41;
    case ErrorCode::Undefined: return 50;
  }
  return 1;
}

}  // namespace voxlrp
