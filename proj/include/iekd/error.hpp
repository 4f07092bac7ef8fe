#pragma once

#include <stdexcept>
#include <string>

namespace iekd {

enum class ErrorKind {
  ShapeMismatch,
  DegenerateBatch,
  LabelOutOfRange,
  NonScalarLoss,
  MissingGradient,
  InvalidConfig,
  ConfigMismatch,
  ZeroFeatureBlock,
  ChannelNotDivisible,
  IndexOutOfRange,
  ZeroNormFactor,
  DegenerateRepresentation,
  RowMismatch,
  DegenerateGradient,
  InvalidRecipe,
  MalformedFile,
  NumericFailure,
  IoError,
};

const char* to_string(ErrorKind kind);

/// Library-wide exception carrying a machine-checkable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}

  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

inline void require(bool cond, ErrorKind kind, const std::string& msg) {
  if (!cond) fail(kind, msg);
}

}  // namespace iekd
