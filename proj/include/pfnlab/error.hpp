#pragma once

#include <stdexcept>
#include <string>

namespace pfnlab {

enum class ErrorCode {
  file_not_found,
  io_error,
  schema_mismatch,
  parse_error,
  too_many_classes,
  too_many_features,
  degenerate_split,
  empty_column,
  all_features_missing,
  unseen_label,
  dimension_mismatch,
  non_finite_activation,
  non_finite_gradient,
  non_finite_update,
  irreducible_degeneracy,
  support_budget_exceeded,
  length_mismatch,
  insufficient_variants,
  invalid_config,
  checkpoint_mismatch,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::file_not_found: return "FileNotFound";
    case ErrorCode::io_error: return "IoError";
    case ErrorCode::schema_mismatch: return "SchemaMismatch";
    case ErrorCode::parse_error: return "ParseError";
    case ErrorCode::too_many_classes: return "TooManyClasses";
    case ErrorCode::too_many_features: return "TooManyFeatures";
    case ErrorCode::degenerate_split: return "DegenerateSplit";
    case ErrorCode::empty_column: return "EmptyColumn";
    case ErrorCode::all_features_missing: return "AllFeaturesMissing";
    case ErrorCode::unseen_label: return "UnseenLabel";
    case ErrorCode::dimension_mismatch: return "DimensionMismatch";
    case ErrorCode::non_finite_activation: return "NonFiniteActivation";
    case ErrorCode::non_finite_gradient: return "NonFiniteGradient";
    case ErrorCode::non_finite_update: return "NonFiniteUpdate";
    case ErrorCode::irreducible_degeneracy: return "IrreducibleDegeneracy";
    case ErrorCode::support_budget_exceeded: return "SupportBudgetExceeded";
    case ErrorCode::length_mismatch: return "LengthMismatch";
    case ErrorCode::insufficient_variants: return "InsufficientVariants";
    case ErrorCode::invalid_config: return "InvalidConfig";
    case ErrorCode::checkpoint_mismatch: return "CheckpointMismatch";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so
/// callers (the CLI in particular) can map it to an exit status.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace pfnlab
