#include "twophase/information.hpp"

#include <cmath>
#include <string>

namespace twophase {

Eigen::VectorXd Design::sampling_probabilities() const {
  Eigen::VectorXd pi(allocation.size());
  for (Eigen::Index k = 0; k < allocation.size(); ++k) {
    pi(k) = strata.count(static_cast<int>(k)) > 0
                ? static_cast<double>(allocation(k)) / strata.count(static_cast<int>(k))
                : 0.0;
  }
  return pi;
}

void Design::validate() const {
  strata.validate();
  if (allocation.size() != strata.size()) {
    throw Error(ErrorKind::InvalidArgument, "allocation length must equal the number of strata");
  }
  for (int k = 0; k < strata.size(); ++k) {
    if (allocation(k) < 0 || allocation(k) > strata.count(k)) {
      throw Error(ErrorKind::InvalidArgument,
                  "allocation for stratum " + std::to_string(k) + " outside [0, N_k]");
    }
  }
}

InformationModel::InformationModel(const ModelSpec& spec, const ParamVector& theta, const StratumTable& strata,
                                   Weighting weighting, double singular_condition)
    : strata_(strata), total_(static_cast<double>(strata.total())), singular_condition_(singular_condition) {
  spec.validate();
  validate(theta, spec);
  strata.validate();
  const ScoreTable table(spec, theta);
  const int p = table.num_parameters();
  const int L = spec.num_z_levels();
  const int K = strata.size();
  const Eigen::VectorXd pz = resolve_z_marginal(theta, spec, strata);

  capacity_ = strata.counts().cast<double>();
  weight_ = Eigen::VectorXd::Zero(K);
  gain_.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(p, p));
  base_ = Eigen::MatrixXd::Zero(p, p);

  auto validated_block = [&](int st) {
    const Eigen::Vector4d cond = table.conditional(st);
    const int c0 = ScoreTable::cell_index(st / 4, (st / 2) % 2, st % 2, 0, 0);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(p, p);
    for (int j = 0; j < 4; ++j) {
      const auto s = table.validated_score(c0 + j);
      a.noalias() += cond(j) * s * s.transpose();
    }
    return a;
  };
  auto unvalidated_block = [&](int st) {
    const Eigen::VectorXd s = table.unvalidated_score(st);
    return Eigen::MatrixXd(s * s.transpose());
  };

  std::vector<int> table_slot(static_cast<std::size_t>(4 * L), -1);
  for (int k = 0; k < K; ++k) {
    const StratumKey& key = strata.key(k);
    if (key.z >= L) throw Error(ErrorKind::InvalidArgument, "stratum z level outside the model's z levels");
    table_slot[static_cast<std::size_t>(ScoreTable::stratum_index(key.z, key.ystar, key.xstar))] = k;
  }

  for (int st = 0; st < 4 * L; ++st) {
    const int k = table_slot[static_cast<std::size_t>(st)];
    const double nk = k >= 0 ? capacity_(k) : 0.0;
    double w = 0.0;
    if (weighting == Weighting::Observed) {
      w = nk / total_;
    } else {
      w = table.stratum_probability(st) * pz(st / 4);
    }
    if (w <= 0.0) continue;
    if (!table.stratum_supported(st)) {
      throw Error(ErrorKind::DegenerateStratum,
                  "Phase I stratum " + std::to_string(k) + " has zero probability under the model");
    }
    const Eigen::MatrixXd b = unvalidated_block(st);
    base_ += w * b;
    if (k >= 0) {
      weight_(k) = w;
      if (nk > 0.0) gain_[static_cast<std::size_t>(k)] = w * (validated_block(st) - b) / nk;
    }
  }
  // Exact symmetry; later combinations are element-wise and preserve it.
  base_ = 0.5 * (base_ + base_.transpose()).eval();
  for (auto& g : gain_) g = 0.5 * (g + g.transpose()).eval();
}

Eigen::MatrixXd InformationModel::information(const Eigen::Ref<const Eigen::VectorXd>& allocation) const {
  if (allocation.size() != num_strata()) {
    throw Error(ErrorKind::InvalidArgument, "allocation length must equal the number of strata");
  }
  Eigen::MatrixXd info = base_;
  for (int k = 0; k < num_strata(); ++k) {
    const double nk = allocation(k);
    if (nk == 0.0) continue;
    if (weight_(k) == 0.0 && capacity_(k) > 0.0) {
      throw Error(ErrorKind::DegenerateStratum,
                  "stratum " + std::to_string(k) + " has positive allocation but zero model probability");
    }
    info.noalias() += nk * gain_[static_cast<std::size_t>(k)];
  }
  return info;
}

double InformationModel::var_beta(const Eigen::Ref<const Eigen::VectorXd>& allocation) const {
  return schur_variance(information(allocation), total_, singular_condition_);
}

double schur_variance(const Eigen::MatrixXd& information, double phase_one_size, double singular_condition) {
  const Eigen::Index p = information.rows();
  if (p == 1) {
    if (!(information(0, 0) > 0.0)) throw Error(ErrorKind::SingularInformation, "information for beta is zero");
    return 1.0 / (phase_one_size * information(0, 0));
  }
  const Eigen::MatrixXd nuisance = information.bottomRightCorner(p - 1, p - 1);
  const Eigen::VectorXd cross = information.col(0).tail(p - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(nuisance);
  const auto& lambda = eig.eigenvalues();
  const double lo = lambda.minCoeff();
  const double hi = lambda.maxCoeff();
  if (!(lo > 0.0) || hi / lo > singular_condition) {
    throw Error(ErrorKind::SingularInformation, "nuisance information block is singular");
  }
  const Eigen::VectorXd rotated = eig.eigenvectors().transpose() * cross;
  const double explained = (rotated.array().square() / lambda.array()).sum();
  const double schur = information(0, 0) - explained;
  if (!(schur > information(0, 0) * 1e-12)) {
    throw Error(ErrorKind::SingularInformation, "Schur complement for beta is not positive");
  }
  return 1.0 / (phase_one_size * schur);
}

Eigen::MatrixXd fisher_information(const ParamVector& theta, const ModelSpec& spec, const Design& design,
                                   Weighting weighting) {
  design.validate();
  return InformationModel(spec, theta, design.strata, weighting).information(design.allocation.cast<double>());
}

double var_beta(const ParamVector& theta, const ModelSpec& spec, const Design& design, Weighting weighting) {
  design.validate();
  return InformationModel(spec, theta, design.strata, weighting).var_beta(design.allocation.cast<double>());
}

}  // namespace twophase
