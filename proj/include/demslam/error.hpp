#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace demslam {

enum class ErrorCode {
  InvalidBounds,
  DegenerateInput,
  EmptyInput,
  ZeroExtent,
  OutOfBounds,
  InvalidTemperature,
  EmptyGrid,
  AllEmptyRegion,
  InvalidSigma,
  NoSalientContent,
  FormatError,
  ZeroVector,
  DuplicateId,
  DimensionMismatch,
  EmptyIndex,
  EmptyCandidate,
  SelfEdge,
  BranchSingularity,
  DisconnectedGraph,
  SingularSystem,
  NoAssociation,
  DependencyError,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  [[nodiscard]] ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace demslam
