#include "demslam/error.hpp"

namespace demslam {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidBounds: return "InvalidBounds";
    case ErrorCode::DegenerateInput: return "DegenerateInput";
    case ErrorCode::EmptyInput: return "EmptyInput";
    case ErrorCode::ZeroExtent: return "ZeroExtent";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::InvalidTemperature: return "InvalidTemperature";
    case ErrorCode::EmptyGrid: return "EmptyGrid";
    case ErrorCode::AllEmptyRegion: return "AllEmptyRegion";
    case ErrorCode::InvalidSigma: return "InvalidSigma";
    case ErrorCode::NoSalientContent: return "NoSalientContent";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::ZeroVector: return "ZeroVector";
    case ErrorCode::DuplicateId: return "DuplicateId";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::EmptyIndex: return "EmptyIndex";
    case ErrorCode::EmptyCandidate: return "EmptyCandidate";
    case ErrorCode::SelfEdge: return "SelfEdge";
    case ErrorCode::BranchSingularity: return "BranchSingularity";
    case ErrorCode::DisconnectedGraph: return "DisconnectedGraph";
    case ErrorCode::SingularSystem: return "SingularSystem";
    case ErrorCode::NoAssociation: return "NoAssociation";
    case ErrorCode::DependencyError: return "DependencyError";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace demslam
