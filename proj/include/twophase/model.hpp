#pragma once

// Probability model for a binary outcome Y and exposure X observed through
// error-prone surrogates Y*, X*, with discrete error-free covariate levels Z:
//
//   P(Y*, X*, Y, X, Z) = P(Y*|X*,Y,X,Z) P(X*|Y,X,Z) P(Y|X,Z) P(X|Z) P(Z)
//
// Each conditional factor is a logistic regression on an explicit term list.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <compare>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "twophase/error.hpp"

namespace twophase {

enum class SubModel {
  OutcomeMisclassification = 0,  // P(Y* | X*, Y, X, Z)
  ExposureMisclassification = 1,  // P(X* | Y, X, Z)
  Outcome = 2,                    // P(Y | X, Z), carries beta
  Exposure = 3,                   // P(X | Z)
};

inline constexpr std::array<SubModel, 4> kSubModels = {
    SubModel::OutcomeMisclassification, SubModel::ExposureMisclassification,
    SubModel::Outcome, SubModel::Exposure};

constexpr int index(SubModel s) noexcept { return static_cast<int>(s); }
std::string_view to_string(SubModel s) noexcept;

enum class Variable { YStar, XStar, Y, X, Z };

// Binary values of one complete observation (excluding Z).
struct Cell {
  int ystar = 0;
  int xstar = 0;
  int y = 0;
  int x = 0;
};

struct Factor {
  Variable variable = Variable::X;
  int z_feature = 0;  // only meaningful for Variable::Z
  bool operator==(const Factor&) const = default;
};

// A predictor term: product of factors; the empty product is the intercept.
class Term {
 public:
  Term() = default;
  explicit Term(std::vector<Factor> factors);

  static Term intercept() { return Term{}; }
  static Term of(Variable v, int z_feature = 0);
  Term operator*(const Term& other) const;

  // Accepts "1", "ystar", "xstar", "y", "x", "z<k>" and products joined by '*'.
  static Term parse(std::string_view text);
  std::string name() const;

  bool is_intercept() const noexcept { return factors_.empty(); }
  bool is_pure(Variable v) const noexcept;
  bool involves(Variable v) const noexcept;
  const std::vector<Factor>& factors() const noexcept { return factors_; }

  template <class Scalar>
  Scalar evaluate(const Cell& cell, const Eigen::VectorXd& z) const {
    Scalar value(1);
    for (const Factor& f : factors_) {
      switch (f.variable) {
        case Variable::YStar: value *= Scalar(cell.ystar); break;
        case Variable::XStar: value *= Scalar(cell.xstar); break;
        case Variable::Y: value *= Scalar(cell.y); break;
        case Variable::X: value *= Scalar(cell.x); break;
        case Variable::Z: value *= Scalar(z(f.z_feature)); break;
      }
    }
    return value;
  }

  bool operator==(const Term&) const = default;

 private:
  std::vector<Factor> factors_;
};

struct ModelSpec {
  // Feature vector for each discrete covariate level; a model without Z has a
  // single level with an empty feature vector.
  std::vector<Eigen::VectorXd> z_levels;
  std::array<std::vector<Term>, 4> terms;

  // Intercept plus all admissible main effects; one Z term per feature.
  static ModelSpec main_effects(std::vector<Eigen::VectorXd> z_levels);
  // Single z-level, no covariates.
  static ModelSpec main_effects();
  // Indicator coding for `levels` categories (first level is the reference).
  static std::vector<Eigen::VectorXd> indicator_levels(int levels);

  const std::vector<Term>& terms_for(SubModel s) const { return terms[index(s)]; }
  std::vector<Term>& terms_for(SubModel s) { return terms[index(s)]; }

  int num_z_levels() const noexcept { return static_cast<int>(z_levels.size()); }
  int num_z_features() const noexcept {
    return z_levels.empty() ? 0 : static_cast<int>(z_levels.front().size());
  }
  // Position of the pure X term inside the outcome sub-model.
  int beta_term() const;
  int num_parameters() const;

  // Flat parameter position of every term of a sub-model. Flat layout is
  // (beta, eta_ystar, eta_xstar, eta_y, eta_x).
  std::vector<int> coefficient_positions(SubModel s) const;
  std::vector<std::string> parameter_names() const;

  void validate() const;
};

template <class Scalar>
struct ParamVectorT {
  using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

  Scalar beta = Scalar(0);
  Vector eta_ystar;
  Vector eta_xstar;
  Vector eta_y;  // outcome-model coefficients other than beta, in term order
  Vector eta_x;
  Eigen::VectorXd z_marginal;  // P(Z = level); empty means "estimate from Phase I"

  Vector flatten() const {
    Vector flat(1 + eta_ystar.size() + eta_xstar.size() + eta_y.size() + eta_x.size());
    flat << Vector::Constant(1, beta), eta_ystar, eta_xstar, eta_y, eta_x;
    return flat;
  }

  static ParamVectorT unflatten(const ModelSpec& spec, const Vector& flat,
                                Eigen::VectorXd z_marginal = {}) {
    const auto n_ys = static_cast<Eigen::Index>(spec.terms_for(SubModel::OutcomeMisclassification).size());
    const auto n_xs = static_cast<Eigen::Index>(spec.terms_for(SubModel::ExposureMisclassification).size());
    const auto n_y = static_cast<Eigen::Index>(spec.terms_for(SubModel::Outcome).size()) - 1;
    const auto n_x = static_cast<Eigen::Index>(spec.terms_for(SubModel::Exposure).size());
    if (flat.size() != 1 + n_ys + n_xs + n_y + n_x) {
      throw Error(ErrorKind::InvalidArgument, "flat parameter vector has wrong length");
    }
    ParamVectorT p;
    p.beta = flat(0);
    p.eta_ystar = flat.segment(1, n_ys);
    p.eta_xstar = flat.segment(1 + n_ys, n_xs);
    p.eta_y = flat.segment(1 + n_ys + n_xs, n_y);
    p.eta_x = flat.segment(1 + n_ys + n_xs + n_y, n_x);
    p.z_marginal = std::move(z_marginal);
    return p;
  }

  template <class Other>
  ParamVectorT<Other> cast() const {
    ParamVectorT<Other> out;
    out.beta = Other(beta);
    out.eta_ystar = eta_ystar.template cast<Other>();
    out.eta_xstar = eta_xstar.template cast<Other>();
    out.eta_y = eta_y.template cast<Other>();
    out.eta_x = eta_x.template cast<Other>();
    out.z_marginal = z_marginal;
    return out;
  }
};

using ParamVector = ParamVectorT<double>;

// All coefficients zero and uniform P(Z).
ParamVector zero_parameters(const ModelSpec& spec);
// Throws InvalidArgument when block lengths, finiteness or z_marginal are off.
void validate(const ParamVector& theta, const ModelSpec& spec);

enum class ErrorTarget { Outcome, Exposure };

struct ErrorRateSpec {
  double fpr = 0.1;
  double tpr = 0.9;
  ErrorTarget target = ErrorTarget::Exposure;
};

struct LogisticCoefficients {
  double intercept = 0.0;
  double slope = 0.0;
};

// intercept = logit(fpr), slope = logit(tpr) - logit(fpr).
LogisticCoefficients fpr_tpr_to_coefficients(const ErrorRateSpec& spec);
// log{p0 / (1 - p0)}.
double prevalence_to_intercept(double p0);

template <class Scalar>
Scalar logistic(Scalar t) {
  using std::exp;
  if (t >= Scalar(0)) return Scalar(1) / (Scalar(1) + exp(-t));
  const Scalar e = exp(t);
  return e / (Scalar(1) + e);
}

// log(logistic(t)) without cancellation.
template <class Scalar>
Scalar log_logistic(Scalar t) {
  using std::exp;
  using std::log1p;
  if (t >= Scalar(0)) return -log1p(exp(-t));
  return t - log1p(exp(t));
}

int response_of(SubModel s, const Cell& cell) noexcept;

template <class Scalar>
Scalar linear_predictor(const ParamVectorT<Scalar>& theta, const ModelSpec& spec, SubModel s,
                        const Cell& cell, int z) {
  const auto& terms = spec.terms_for(s);
  const Eigen::VectorXd& zf = spec.z_levels.at(static_cast<std::size_t>(z));
  Scalar lp(0);
  switch (s) {
    case SubModel::OutcomeMisclassification:
      for (std::size_t j = 0; j < terms.size(); ++j)
        lp += theta.eta_ystar(static_cast<Eigen::Index>(j)) * terms[j].template evaluate<Scalar>(cell, zf);
      break;
    case SubModel::ExposureMisclassification:
      for (std::size_t j = 0; j < terms.size(); ++j)
        lp += theta.eta_xstar(static_cast<Eigen::Index>(j)) * terms[j].template evaluate<Scalar>(cell, zf);
      break;
    case SubModel::Outcome: {
      const int bt = spec.beta_term();
      Eigen::Index k = 0;
      for (std::size_t j = 0; j < terms.size(); ++j) {
        const Scalar coef = static_cast<int>(j) == bt ? theta.beta : theta.eta_y(k++);
        lp += coef * terms[j].template evaluate<Scalar>(cell, zf);
      }
      break;
    }
    case SubModel::Exposure:
      for (std::size_t j = 0; j < terms.size(); ++j)
        lp += theta.eta_x(static_cast<Eigen::Index>(j)) * terms[j].template evaluate<Scalar>(cell, zf);
      break;
  }
  return lp;
}

// P(response of sub-model s | its predictors) at the given cell.
template <class Scalar>
Scalar submodel_probability(const ParamVectorT<Scalar>& theta, const ModelSpec& spec, SubModel s,
                            const Cell& cell, int z) {
  const Scalar lp = linear_predictor(theta, spec, s, cell, z);
  return response_of(s, cell) == 1 ? logistic(lp) : logistic(Scalar(-lp));
}

// Product of the four sub-model probabilities and P(Z = z).
template <class Scalar>
Scalar joint_probability(const ParamVectorT<Scalar>& theta, const ModelSpec& spec, int ystar,
                         int xstar, int y, int x, int z) {
  const Cell cell{ystar, xstar, y, x};
  Scalar p(1);
  for (SubModel s : kSubModels) p *= submodel_probability(theta, spec, s, cell, z);
  const double pz = theta.z_marginal.size() == 0
                        ? 1.0 / static_cast<double>(spec.num_z_levels())
                        : theta.z_marginal(z);
  return p * Scalar(pz);
}

// P(Y = y, X = x | Y*, X*, Z) for (y, x) in order (0,0), (0,1), (1,0), (1,1).
Eigen::Vector4d phase2_given_phase1(const ParamVector& theta, const ModelSpec& spec, int ystar,
                                    int xstar, int z);

// Phase I stratum key: the cross-classification (Y*, X*, Z level).
struct StratumKey {
  int ystar = 0;
  int xstar = 0;
  int z = 0;
  auto operator<=>(const StratumKey&) const = default;
};

class StratumTable {
 public:
  StratumTable() = default;
  StratumTable(std::vector<StratumKey> keys, Eigen::VectorXi counts);

  // Canonical (y*, x*) x z-level table in key order ((y*, x*) inner, z outer).
  static StratumTable from_counts(const Eigen::VectorXi& counts, int z_levels = 1);

  int size() const noexcept { return static_cast<int>(keys_.size()); }
  const std::vector<StratumKey>& keys() const noexcept { return keys_; }
  const StratumKey& key(int k) const { return keys_.at(static_cast<std::size_t>(k)); }
  const Eigen::VectorXi& counts() const noexcept { return counts_; }
  int count(int k) const { return counts_(k); }
  long long total() const noexcept { return counts_.cast<long long>().sum(); }
  std::optional<int> find(const StratumKey& key) const;
  // Distinct z levels present, ascending.
  std::vector<int> z_levels_present() const;
  // P(Z) estimated by Phase I z-level frequencies, length `levels`.
  Eigen::VectorXd empirical_z_marginal(int levels) const;

  void validate() const;

 private:
  std::vector<StratumKey> keys_;
  Eigen::VectorXi counts_;
};

// theta.z_marginal if supplied, otherwise the empirical frequencies of `strata`.
Eigen::VectorXd resolve_z_marginal(const ParamVector& theta, const ModelSpec& spec,
                                   const StratumTable& strata);

}  // namespace twophase
