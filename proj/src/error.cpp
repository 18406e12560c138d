#include "lowkey/error.hpp"

namespace lowkey {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidKernel: return "InvalidKernel";
    case ErrorCode::InvalidQuality: return "InvalidQuality";
    case ErrorCode::DecodeError: return "DecodeError";
    case ErrorCode::EncodeError: return "EncodeError";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DegenerateLandmarks: return "DegenerateLandmarks";
    case ErrorCode::ModelContractViolation: return "ModelContractViolation";
    case ErrorCode::DegenerateEmbedding: return "DegenerateEmbedding";
    case ErrorCode::InsufficientClasses: return "InsufficientClasses";
    case ErrorCode::DegenerateFeatures: return "DegenerateFeatures";
    case ErrorCode::NoFaceFound: return "NoFaceFound";
    case ErrorCode::NumericalFailure: return "NumericalFailure";
    case ErrorCode::SplitError: return "SplitError";
    case ErrorCode::EmptyGallery: return "EmptyGallery";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

Error::Error(ErrorCode code, const std::string& message)
    : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

}  // namespace lowkey
