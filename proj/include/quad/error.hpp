#pragma once

#include <stdexcept>
#include <string>

namespace quad {

enum class ErrorKind {
  kShape,
  kRange,
  kCycle,
  kDangling,
  kUndefined,
  kFormat,
  kIntegrity,
  kCoverage,
  kBinding,
  kDivergence,
  kParameter,
  kIo,
};

const char* ErrorKindName(ErrorKind kind);

// Single exception type for the toolkit; callers branch on kind().
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(ErrorKindName(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace quad
