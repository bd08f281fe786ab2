#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace zooguard {

enum class ErrorCode {
  missing_label_column,
  parse_error,
  empty_dataset,
  all_features_dropped,
  arity_mismatch,
  class_too_small,
  precondition_violation,
  diverged_training,
  immutable_coordinate,
  non_finite_gradient,
  no_eligible_coordinates,
  mixed_labels,
  io_error,
  config_error,
};

inline const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::missing_label_column: return "MissingLabelColumn";
    case ErrorCode::parse_error: return "ParseError";
    case ErrorCode::empty_dataset: return "EmptyDataset";
    case ErrorCode::all_features_dropped: return "AllFeaturesDropped";
    case ErrorCode::arity_mismatch: return "ArityMismatch";
    case ErrorCode::class_too_small: return "ClassTooSmall";
    case ErrorCode::precondition_violation: return "PreconditionViolation";
    case ErrorCode::diverged_training: return "DivergedTraining";
    case ErrorCode::immutable_coordinate: return "ImmutableCoordinate";
    case ErrorCode::non_finite_gradient: return "NonFiniteGradient";
    case ErrorCode::no_eligible_coordinates: return "NoEligibleCoordinates";
    case ErrorCode::mixed_labels: return "MixedLabels";
    case ErrorCode::io_error: return "IoError";
    case ErrorCode::config_error: return "ConfigError";
  }
  return "Unknown";
}

/// Base exception for every failure raised by the toolkit. The code is the
/// stable, machine-checkable part; the message is for humans.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

/// Non-numeric cell in a numeric column. `row` is the 1-based data row
/// (the header is not counted).
class ParseError : public Error {
 public:
  ParseError(std::size_t row, std::string column)
      : Error(ErrorCode::parse_error,
              "row " + std::to_string(row) + ", column '" + column + "'"),
        row_(row),
        column_(std::move(column)) {}

  std::size_t row() const noexcept { return row_; }
  const std::string& column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::string column_;
};

inline void require(bool condition, ErrorCode code, const std::string& message) {
  if (!condition) throw Error(code, message);
}

inline void check_arity(std::size_t got, std::size_t expected, const char* what) {
  if (got != expected) {
    throw Error(ErrorCode::arity_mismatch, std::string(what) + ": expected " +
                                               std::to_string(expected) + " values, got " +
                                               std::to_string(got));
  }
}

}  // namespace zooguard
