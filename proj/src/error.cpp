#include "twophase/error.hpp"

namespace twophase {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::DegenerateRate: return "DegenerateRate";
    case ErrorKind::DegenerateStratum: return "DegenerateStratum";
    case ErrorKind::NonFiniteLikelihood: return "NonFiniteLikelihood";
    case ErrorKind::SingularInformation: return "SingularInformation";
    case ErrorKind::SeparationDetected: return "SeparationDetected";
    case ErrorKind::MaxIterations: return "MaxIterations";
    case ErrorKind::NonDivisibleStep: return "NonDivisibleStep";
    case ErrorKind::InfeasibleBudget: return "InfeasibleBudget";
    case ErrorKind::NoFeasibleDesign: return "NoFeasibleDesign";
    case ErrorKind::CapacityExceeded: return "CapacityExceeded";
    case ErrorKind::WaveFitFailed: return "WaveFitFailed";
    case ErrorKind::IllegalTransition: return "IllegalTransition";
    case ErrorKind::VersionConflict: return "VersionConflict";
    case ErrorKind::NotFound: return "NotFound";
    case ErrorKind::Cancelled: return "Cancelled";
  }
  return "Unknown";
}

bool is_numeric_failure(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::DegenerateStratum:
    case ErrorKind::NonFiniteLikelihood:
    case ErrorKind::SingularInformation:
    case ErrorKind::SeparationDetected:
    case ErrorKind::MaxIterations:
    case ErrorKind::NoFeasibleDesign:
    case ErrorKind::WaveFitFailed:
      return true;
    default:
      return false;
  }
}

}  // namespace twophase
