#include "iekd/error.hpp"

namespace iekd {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DegenerateBatch: return "DegenerateBatch";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::NonScalarLoss: return "NonScalarLoss";
    case ErrorKind::MissingGradient: return "MissingGradient";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ConfigMismatch: return "ConfigMismatch";
    case ErrorKind::ZeroFeatureBlock: return "ZeroFeatureBlock";
    case ErrorKind::ChannelNotDivisible: return "ChannelNotDivisible";
    case ErrorKind::IndexOutOfRange: return "IndexOutOfRange";
    case ErrorKind::ZeroNormFactor: return "ZeroNormFactor";
    case ErrorKind::DegenerateRepresentation: return "DegenerateRepresentation";
    case ErrorKind::RowMismatch: return "RowMismatch";
    case ErrorKind::DegenerateGradient: return "DegenerateGradient";
    case ErrorKind::InvalidRecipe: return "InvalidRecipe";
    case ErrorKind::MalformedFile: return "MalformedFile";
    case ErrorKind::NumericFailure: return "NumericFailure";
    case ErrorKind::IoError: return "IoError";
  }
  return "UnknownError";
}

}  // namespace iekd
