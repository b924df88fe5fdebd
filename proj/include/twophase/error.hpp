#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace twophase {

enum class ErrorKind {
  InvalidArgument,
  ParseError,
  DegenerateRate,
  DegenerateStratum,
  NonFiniteLikelihood,
  SingularInformation,
  SeparationDetected,
  MaxIterations,
  NonDivisibleStep,
  InfeasibleBudget,
  NoFeasibleDesign,
  CapacityExceeded,
  WaveFitFailed,
  IllegalTransition,
  VersionConflict,
  NotFound,
  Cancelled,
};

std::string_view to_string(ErrorKind kind) noexcept;

// Numeric failures are properties of the data or parameters (exit code 3 /
// HTTP 422); everything else is a request validation problem.
bool is_numeric_failure(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace twophase
