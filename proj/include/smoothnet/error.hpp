#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smoothnet {

enum class ErrorCode {
  // io
  MalformedHeader,
  UnsupportedEncoding,
  MissingCoordinateProperty,
  TruncatedPayload,
  BadMagic,
  DimMismatch,
  UnknownKey,
  InvariantViolation,
  FileError,
  // lrf / match
  DegenerateSupport,
  DegenerateConfiguration,
  TooFewCorrespondences,
  NoModelFound,
  EmptyCloud,
  // net / train
  BadArchitecture,
  ShapeMismatch,
  StaleCache,
  VersionMismatch,
  BatchTooSmall,
  InsufficientOverlap,
  NonFiniteLoss,
  EmptyManifest,
  // eval
  EmptyCorrespondences,
  NoPairs,
  DomainError,
};

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::MalformedHeader: return "MalformedHeader";
    case ErrorCode::UnsupportedEncoding: return "UnsupportedEncoding";
    case ErrorCode::MissingCoordinateProperty: return "MissingCoordinateProperty";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::UnknownKey: return "UnknownKey";
    case ErrorCode::InvariantViolation: return "InvariantViolation";
    case ErrorCode::FileError: return "FileError";
    case ErrorCode::DegenerateSupport: return "DegenerateSupport";
    case ErrorCode::DegenerateConfiguration: return "DegenerateConfiguration";
    case ErrorCode::TooFewCorrespondences: return "TooFewCorrespondences";
    case ErrorCode::NoModelFound: return "NoModelFound";
    case ErrorCode::EmptyCloud: return "EmptyCloud";
    case ErrorCode::BadArchitecture: return "BadArchitecture";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::StaleCache: return "StaleCache";
    case ErrorCode::VersionMismatch: return "VersionMismatch";
    case ErrorCode::BatchTooSmall: return "BatchTooSmall";
    case ErrorCode::InsufficientOverlap: return "InsufficientOverlap";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::EmptyManifest: return "EmptyManifest";
    case ErrorCode::EmptyCorrespondences: return "EmptyCorrespondences";
    case ErrorCode::NoPairs: return "NoPairs";
    case ErrorCode::DomainError: return "DomainError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above; the
/// message text is prefixed with the code name.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace smoothnet
