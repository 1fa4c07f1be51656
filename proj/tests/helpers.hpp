#pragma once

#include <catch2/catch_amalgamated.hpp>

#include <string>

#include "calldet/errors.hpp"

namespace calldet {

class ErrorCodeMatcher : public Catch::Matchers::MatcherGenericBase {
 public:
  explicit ErrorCodeMatcher(ErrorCode code) : code_(code) {}
  bool match(const Error& e) const { return e.code() == code_; }
  std::string describe() const override {
    return std::string("has error code ") + error_code_name(code_);
  }

 private:
  ErrorCode code_;
};

inline ErrorCodeMatcher ErrorHasCode(ErrorCode code) {
  return ErrorCodeMatcher(code);
}

}  // namespace calldet
