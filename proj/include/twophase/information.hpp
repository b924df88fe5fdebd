#pragma once

#include <Eigen/Dense>

#include <vector>

#include "twophase/likelihood.hpp"
#include "twophase/model.hpp"

namespace twophase {

// Phase II allocation n_k over a Phase I stratum table.
struct Design {
  StratumTable strata;
  Eigen::VectorXi allocation;

  int n() const { return allocation.sum(); }
  // pi_k = n_k / N_k (0 for empty strata).
  Eigen::VectorXd sampling_probabilities() const;
  // Throws InvalidArgument unless 0 <= n_k <= N_k for every stratum.
  void validate() const;
};

// Observed: the (y*, x*, z) margin is the Phase I frequency N_k / N.
// Expected: the margin is the model probability P(y*, x*, z).
enum class Weighting { Observed, Expected };

// Per-subject expected Fisher information as a function of the allocation:
//
//   I(n) = sum_k w_k { pi_k A_k + (1 - pi_k) B_k },
//   A_k  = sum_{y,x} P(y, x | k) S^v S^v^T,   B_k = S^vbar S^vbar^T,
//
// with w_k the stratum weight under the chosen weighting. A_k and B_k depend
// on theta only and are computed once; each candidate design then costs K
// scaled matrix additions.
class InformationModel {
 public:
  InformationModel(const ModelSpec& spec, const ParamVector& theta, const StratumTable& strata,
                   Weighting weighting = Weighting::Observed, double singular_condition = 1e12);

  int num_parameters() const noexcept { return static_cast<int>(base_.rows()); }
  int num_strata() const noexcept { return static_cast<int>(capacity_.size()); }
  double phase_one_size() const noexcept { return total_; }
  const StratumTable& strata() const noexcept { return strata_; }

  // Allocations may be fractional; entries are clamped to neither side.
  Eigen::MatrixXd information(const Eigen::Ref<const Eigen::VectorXd>& allocation) const;
  // N^{-1} {I_bb - I_be I_ee^{-1} I_eb}^{-1}; throws SingularInformation.
  double var_beta(const Eigen::Ref<const Eigen::VectorXd>& allocation) const;

 private:
  StratumTable strata_;
  double total_ = 0.0;
  double singular_condition_;
  Eigen::VectorXd capacity_;              // N_k
  Eigen::VectorXd weight_;                // w_k
  std::vector<Eigen::MatrixXd> gain_;     // w_k (A_k - B_k) / N_k, zero for empty strata
  Eigen::MatrixXd base_;                  // sum of w B over all model strata
};

// Variance of the first coordinate from a full information matrix scaled by 1 / N.
// Throws SingularInformation when the nuisance block is not safely invertible.
double schur_variance(const Eigen::MatrixXd& information, double phase_one_size,
                      double singular_condition = 1e12);

Eigen::MatrixXd fisher_information(const ParamVector& theta, const ModelSpec& spec, const Design& design,
                                   Weighting weighting = Weighting::Observed);
double var_beta(const ParamVector& theta, const ModelSpec& spec, const Design& design,
                Weighting weighting = Weighting::Observed);

}  // namespace twophase
