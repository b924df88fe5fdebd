#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "twophase/likelihood.hpp"
#include "twophase/model.hpp"

namespace twophase {

// A binary error-free covariate Z entering every sub-model.
struct CovariateConfig {
  double p_z = 0.25;
  double beta_z = 0.0;        // Z in the outcome model
  double x_z = 0.5;           // Z in the exposure model
  double lambda = 0.0;        // Z in both misclassification models
  double delta_xstar = 0.0;   // X*Z in the X* model
  double delta_ystar = 0.0;   // X*Z in the Y* model
  bool interaction_in_model = false;  // fit X*Z terms
};

struct SimScenario {
  int N = 2000;
  int n = 200;
  int m = 10;
  int replicates = 200;
  std::uint64_t seed = 1;
  double p_y0 = 0.3;
  double p_x = 0.1;
  double beta = 0.3;
  ErrorRateSpec ystar_errors{0.1, 0.9, ErrorTarget::Outcome};
  ErrorRateSpec xstar_errors{0.1, 0.9, ErrorTarget::Exposure};
  double xstar_on_y = 0.45;
  double ystar_on_xstar = 0.275;
  double ystar_on_x = 0.275;
  std::optional<CovariateConfig> covariate;
  // Any of "optmle", "optmle2", "optmle3", "bccstar", "ccstar", "srs".
  std::vector<std::string> designs{"optmle", "optmle2", "bccstar", "ccstar", "srs"};
  std::uint64_t max_rows = 10000;
  unsigned threads = 0;
  // Fit with nuisance coefficients held at the separation bound instead of failing.
  bool allow_boundary_nuisance = true;

  void validate() const;
  // "optmle" when listed, otherwise the first design.
  std::string reference_design() const;
};

// Model used for generation (includes any interaction) and for fitting.
ModelSpec generating_spec(const SimScenario& scenario);
ModelSpec fitting_spec(const SimScenario& scenario);
// Generating coefficients; `spec` selects which terms are kept.
ParamVector scenario_parameters(const SimScenario& scenario, const ModelSpec& spec);

struct Cohort {
  Dataset truth;  // every record validated
  StratumTable strata;
};

Cohort generate_cohort(const SimScenario& scenario, std::uint64_t seed);

// Copy of `truth` where only `validated` (sorted indices) keep (y, x).
Dataset mask_unvalidated(const Dataset& truth, const std::vector<std::size_t>& validated);

struct ReplicateOutcome {
  int replicate = 0;
  std::string design;
  double beta_hat = 0.0;  // NaN when failed
  std::string status;     // "ok" or the failure kind
};

struct MetricsRow {
  std::string design;
  int successes = 0;
  int failures = 0;
  double mean = 0.0;
  double pct_bias = 0.0;
  double se = 0.0;
  double re = 0.0;
  double ri = 0.0;
};

struct SimulationResult {
  std::vector<MetricsRow> metrics;
  std::vector<ReplicateOutcome> replicates;  // replicate-major, design order within
};

SimulationResult run_replicates(const SimScenario& scenario);
// Aggregates outcomes; failures never enter the moments.
std::vector<MetricsRow> summarize(const std::vector<ReplicateOutcome>& outcomes, const std::vector<std::string>& designs,
                                  const std::string& reference, double beta);

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows);
void write_replicates_csv(std::ostream& out, const std::vector<ReplicateOutcome>& rows);

}  // namespace twophase
