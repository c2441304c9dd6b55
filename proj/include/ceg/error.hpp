#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ceg {

enum class ErrorKind {
  NumericInput,
  Shape,
  DegenerateVector,
  Parameter,
  EmptyBatch,
  EmptyPool,
  Budget,
  DoubleQuery,
  Configuration,
  EmptyKnowledge,
  Consistency,
  Schedule,
  Parse,
  Evaluation,
  Io,
};

inline std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::NumericInput: return "numeric-input";
    case ErrorKind::Shape: return "shape";
    case ErrorKind::DegenerateVector: return "degenerate-vector";
    case ErrorKind::Parameter: return "parameter";
    case ErrorKind::EmptyBatch: return "empty-batch";
    case ErrorKind::EmptyPool: return "empty-pool";
    case ErrorKind::Budget: return "budget";
    case ErrorKind::DoubleQuery: return "double-query";
    case ErrorKind::Configuration: return "configuration";
    case ErrorKind::EmptyKnowledge: return "empty-knowledge";
    case ErrorKind::Consistency: return "consistency";
    case ErrorKind::Schedule: return "schedule";
    case ErrorKind::Parse: return "parse";
    case ErrorKind::Evaluation: return "evaluation";
    case ErrorKind::Io: return "io";
  }
  return "unknown";
}

/// Single exception type for the library; `kind()` tells callers which
/// contract was violated.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + " error: " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace ceg
