#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "twophase/model.hpp"

namespace twophase {

struct Record {
  int v = 0;  // 1 when (y, x) were validated
  int ystar = 0;
  int xstar = 0;
  std::optional<int> y;
  std::optional<int> x;
  int z = 0;  // index into ModelSpec::z_levels

  Cell cell() const { return {ystar, xstar, y.value_or(0), x.value_or(0)}; }
  StratumKey stratum() const { return {ystar, xstar, z}; }
};

struct Dataset {
  ModelSpec spec;
  std::vector<Record> records;

  // Record-level invariants; `require_validated` additionally demands v = 1 somewhere.
  void validate(bool require_validated = false) const;
  std::size_t validated_count() const;
};

// Phase I strata of a record set; keys in canonical order over present z levels.
StratumTable tabulate_strata(const std::vector<Record>& records);
// Record indices falling in each stratum of `strata` (same order).
std::vector<std::vector<std::size_t>> index_strata(const std::vector<Record>& records,
                                                   const StratumTable& strata);

// Every model quantity that depends on theta alone, over the 16 * |Z| support
// cells: log P(y*, x*, y, x | z) (P(Z) excluded), the validated score S^v, and
// for each (y*, x*, z) stratum the marginal and the unvalidated score S^vbar.
class ScoreTable {
 public:
  ScoreTable(const ModelSpec& spec, const ParamVector& theta);

  static constexpr int cell_index(int z, int ystar, int xstar, int y, int x) noexcept {
    return (((z * 2 + ystar) * 2 + xstar) * 2 + y) * 2 + x;
  }
  static constexpr int stratum_index(int z, int ystar, int xstar) noexcept {
    return (z * 2 + ystar) * 2 + xstar;
  }

  int num_parameters() const noexcept { return static_cast<int>(validated_.rows()); }
  int num_z_levels() const noexcept { return z_levels_; }

  double log_probability(int cell) const { return log_prob_(cell); }
  double probability(int cell) const { return std::exp(log_prob_(cell)); }
  auto validated_score(int cell) const { return validated_.col(cell); }

  // Sum over (y, x); zero when the stratum is unsupported.
  double stratum_probability(int stratum) const { return stratum_prob_(stratum); }
  double stratum_log_probability(int stratum) const { return stratum_log_prob_(stratum); }
  bool stratum_supported(int stratum) const { return stratum_prob_(stratum) > 0.0; }
  // Throws DegenerateStratum for unsupported strata.
  Eigen::VectorXd unvalidated_score(int stratum) const;
  // P(y, x | y*, x*, z), ordered (0,0), (0,1), (1,0), (1,1).
  Eigen::Vector4d conditional(int stratum) const;

 private:
  int z_levels_;
  Eigen::VectorXd log_prob_;          // 16 L
  Eigen::MatrixXd validated_;         // p x 16 L
  Eigen::VectorXd stratum_prob_;      // 4 L
  Eigen::VectorXd stratum_log_prob_;  // 4 L
  Eigen::MatrixXd unvalidated_;       // p x 4 L
};

// Record counts per support cell (validated) and per stratum (unvalidated).
struct CellCounts {
  Eigen::VectorXd validated;    // 16 L
  Eigen::VectorXd unvalidated;  // 4 L
  static CellCounts tabulate(const Dataset& data);
};

double observed_loglik(const ParamVector& theta, const Dataset& data);
Eigen::VectorXd observed_score(const ParamVector& theta, const Dataset& data);

// Per-record score vectors over the flat parameter layout.
Eigen::VectorXd score_validated(const ParamVector& theta, const ModelSpec& spec, const Record& record);
Eigen::VectorXd score_unvalidated(const ParamVector& theta, const ModelSpec& spec, const Record& record);

// Negative Hessian of the observed log-likelihood by central differences of
// the analytic score.
Eigen::MatrixXd observed_information(const ParamVector& theta, const Dataset& data);

struct FitOptions {
  int max_iterations = 500;
  double gradient_tolerance = 1e-8;
  double relative_tolerance = 1e-12;
  double separation_bound = 15.0;
  double singular_condition = 1e12;
  bool compute_information = false;
  // Nuisance coefficients reaching the bound are held there and the rest are
  // maximized (box-constrained MLE); beta reaching it is still separation.
  bool allow_boundary_nuisance = false;
};

struct FitResult {
  ParamVector theta_hat;
  double loglik = 0.0;
  double gradient_norm = 0.0;  // max-norm of the score over free coefficients
  bool converged = false;
  int iterations = 0;
  std::optional<Eigen::MatrixXd> information_at_mle;
  std::vector<std::string> boundary;  // coefficients held at the separation bound
};

// Intercepts at the logits of marginal frequencies, everything else zero.
ParamVector default_initialization(const Dataset& data);

// Maximizes the observed-data log-likelihood. Throws SeparationDetected,
// SingularInformation or MaxIterations when the data cannot support a fit.
FitResult fit_mle(const Dataset& data, const std::optional<ParamVector>& init = std::nullopt,
                  const FitOptions& options = {});

}  // namespace twophase
