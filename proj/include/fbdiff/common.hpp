#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fbdiff {

/// Error categories surfaced by the library. Structured so callers (CLI,
/// tests) can distinguish malformed input from internal contract violations.
enum class ErrorCode {
  ShapeMismatch,
  InvalidArgument,
  BadMagic,
  BadVersion,
  TruncatedPayload,
  DimOverflow,
  TrailingBytes,
  IoFailure,
  BadConfig,
  BadCheckpoint,
  Diverged,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::BadMagic: return "BadMagic";
    case ErrorCode::BadVersion: return "BadVersion";
    case ErrorCode::TruncatedPayload: return "TruncatedPayload";
    case ErrorCode::DimOverflow: return "DimOverflow";
    case ErrorCode::TrailingBytes: return "TrailingBytes";
    case ErrorCode::IoFailure: return "IoFailure";
    case ErrorCode::BadConfig: return "BadConfig";
    case ErrorCode::BadCheckpoint: return "BadCheckpoint";
    case ErrorCode::Diverged: return "Diverged";
  }
  return "Unknown";
}

/// Exception carrying an ErrorCode plus, for file-format errors, the byte
/// offset at which the problem was detected (-1 when not applicable).
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& msg, int64_t offset = -1)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + msg +
                           (offset >= 0 ? " (offset " + std::to_string(offset) + ")" : "")),
        code_(code),
        offset_(offset) {}

  ErrorCode code() const { return code_; }
  int64_t offset() const { return offset_; }

 private:
  ErrorCode code_;
  int64_t offset_;
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) throw Error(code, msg);
}

}  // namespace fbdiff
