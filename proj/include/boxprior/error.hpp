#pragma once

#include <stdexcept>
#include <string>

namespace boxprior {

enum class ErrorCode {
  EmptyMask,
  OutOfBounds,
  InvalidTemperature,
  EmptyCloud,
  MissingProvenance,
  DegenerateConfiguration,
  DimensionMismatch,
  InsufficientBackground,
  SingleClass,
  CoverageGap,
  InvalidConfig,
  InvalidArgument,
  Io,
};

inline const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::EmptyMask: return "EmptyMask";
    case ErrorCode::OutOfBounds: return "OutOfBounds";
    case ErrorCode::InvalidTemperature: return "InvalidTemperature";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::MissingProvenance: return "MissingProvenance";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::InsufficientBackground: return "InsufficientBackground";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::CoverageGap: return "CoverageGap";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::Io: return "Io";
  }
  return "Unknown";
}

/// Exception carrying a machine-readable code; what() is "<Code>: <detail>".
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& detail)
      : std::runtime_error(std::string(to_string(code)) + ": " + detail), code_(code), detail_(detail) {}

  ErrorCode code() const noexcept { return code_; }
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorCode code_;
  std::string detail_;
};

}  // namespace boxprior
