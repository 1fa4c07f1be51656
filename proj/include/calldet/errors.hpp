#pragma once

#include <stdexcept>
#include <string>

namespace calldet {

enum class ErrorCode {
  // audio
  NotWav,
  UnsupportedFormat,
  Truncated,
  IoError,
  // features
  DegenerateFilter,
  RateMismatch,
  TooShort,
  Empty,
  DimMismatch,
  // nnet
  ShapeMismatch,
  LengthMismatch,
  BadLabel,
  BadArgument,
  // training
  EmptyDataset,
  NoPositives,
  SingleClass,
  OverlappingSegments,
  // decoding / metrics
  BadBand,
  UnsortedInput,
  TooFew,
  // synth
  BadConfig,
  // persistence
  BadVersion,
  KindMismatch,
  Corrupt,
  ParseError,
  OverlapError,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::NotWav: return "NotWav";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::Truncated: return "Truncated";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::DegenerateFilter: return "DegenerateFilter";
    case ErrorCode::RateMismatch: return "RateMismatch";
    case ErrorCode::TooShort: return "TooShort";
    case ErrorCode::Empty: return "Empty";
    case ErrorCode::DimMismatch: return "DimMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::LengthMismatch: return "LengthMismatch";
    case ErrorCode::BadLabel: return "BadLabel";
    case ErrorCode::BadArgument: return "BadArgument";
    case ErrorCode::EmptyDataset: return "EmptyDataset";
    case ErrorCode::NoPositives: return "NoPositives";
    case ErrorCode::SingleClass: return "SingleClass";
    case ErrorCode::OverlappingSegments: return "OverlappingSegments";
    case ErrorCode::BadBand: return "BadBand";
    case ErrorCode::UnsortedInput: return "UnsortedInput";
    case ErrorCode::TooFew: return "TooFew";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::BadVersion: return "BadVersion";
    case ErrorCode::KindMismatch: return "KindMismatch";
    case ErrorCode::Corrupt: return "Corrupt";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::OverlapError: return "OverlapError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace calldet
