#pragma once

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lowkey {

enum class ErrorCode {
  InvalidKernel,
  InvalidQuality,
  DecodeError,
  EncodeError,
  ShapeMismatch,
  DegenerateLandmarks,
  ModelContractViolation,
  DegenerateEmbedding,
  InsufficientClasses,
  DegenerateFeatures,
  NoFaceFound,
  NumericalFailure,
  SplitError,
  EmptyGallery,
  ConfigError,
  IoError,
};

std::string_view to_string(ErrorCode code);

// All library failures are reported through this type; `code()` is the
// stable machine-readable name surfaced by the CLI and the HTTP service.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message);

  ErrorCode code() const noexcept { return code_; }
  std::string_view code_name() const { return to_string(code_); }

 private:
  ErrorCode code_;
};

class NumericalFailure : public Error {
 public:
  NumericalFailure(const std::string& message, std::vector<double> trace)
      : Error(ErrorCode::NumericalFailure, message), trace_(std::move(trace)) {}

  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace lowkey
