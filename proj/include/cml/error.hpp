// cml/error.hpp

// Copyright 2026 The CML Annotation Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace cml {

enum class ErrorCode {
  kUnsupportedFormat,
  kCorruptHeader,
  kIoError,
  kAudioTooShort,
  kCacheCorrupt,
  kEmptyAnnotation,
  kInvalidAnnotation,
  kDegenerateData,
  kNonFinite,
  kDimensionMismatch,
  kUnfinishedAnnotation,
  kLengthMismatch,
  kSingleClass,
  kZeroVariance,
  kInvalidRange,
  kForbidden,
  kLocked,
  kMissingReference,
  kReferenceInUse,
  kNotFound,
  kUnauthorized,
  kValidationError,
  kJobNotFound,
};

inline std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kUnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::kCorruptHeader: return "CorruptHeader";
    case ErrorCode::kIoError: return "IoError";
    case ErrorCode::kAudioTooShort: return "AudioTooShort";
    case ErrorCode::kCacheCorrupt: return "CacheCorrupt";
    case ErrorCode::kEmptyAnnotation: return "EmptyAnnotation";
    case ErrorCode::kInvalidAnnotation: return "InvalidAnnotation";
    case ErrorCode::kDegenerateData: return "DegenerateData";
    case ErrorCode::kNonFinite: return "NonFinite";
    case ErrorCode::kDimensionMismatch: return "DimensionMismatch";
    case ErrorCode::kUnfinishedAnnotation: return "UnfinishedAnnotation";
    case ErrorCode::kLengthMismatch: return "LengthMismatch";
    case ErrorCode::kSingleClass: return "SingleClass";
    case ErrorCode::kZeroVariance: return "ZeroVariance";
    case ErrorCode::kInvalidRange: return "InvalidRange";
    case ErrorCode::kForbidden: return "Forbidden";
    case ErrorCode::kLocked: return "Locked";
    case ErrorCode::kMissingReference: return "MissingReference";
    case ErrorCode::kReferenceInUse: return "ReferenceInUse";
    case ErrorCode::kNotFound: return "NotFound";
    case ErrorCode::kUnauthorized: return "Unauthorized";
    case ErrorCode::kValidationError: return "ValidationError";
    case ErrorCode::kJobNotFound: return "JobNotFound";
  }
  return "Unknown";
}

// All library failures are reported through this exception type; callers
// branch on code() rather than on the message text.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(ErrorCodeName(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace cml
