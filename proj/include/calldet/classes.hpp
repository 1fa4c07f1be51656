#pragma once

#include "calldet/errors.hpp"

namespace calldet {

// Stage-2 target classes. Integer codes are part of the file formats and
// must never be renumbered.
enum class CallClass { CleanCall = 0, NonlinearCall = 1, FalseAlarm = 2 };

inline int call_class_code(CallClass c) { return static_cast<int>(c); }

inline CallClass call_class_from_code(int code) {
  if (code < 0 || code > 2)
    throw Error(ErrorCode::BadLabel, "class code " + std::to_string(code));
  return static_cast<CallClass>(code);
}

inline const char* call_class_name(CallClass c) {
  switch (c) {
    case CallClass::CleanCall: return "CleanCall";
    case CallClass::NonlinearCall: return "NonlinearCall";
    case CallClass::FalseAlarm: return "FalseAlarm";
  }
  return "Unknown";
}

}  // namespace calldet
