#pragma once

#include <Eigen/Dense>

#include <random>
#include <vector>

#include "oracles.hpp"
#include "twophase/model.hpp"

namespace testing {

inline twophase::StratumTable example_strata() {
  return twophase::StratumTable::from_counts((Eigen::VectorXi(4) << 5297, 1130, 2655, 918).finished());
}

inline twophase::ModelSpec spec_for(bool with_z) {
  using twophase::ModelSpec;
  return with_z ? ModelSpec::main_effects(ModelSpec::indicator_levels(2)) : ModelSpec::main_effects();
}

// Default simulation parameters: p_y0 0.3, p_x 0.1, beta 0.3, FPR 0.1 / TPR 0.9.
inline twophase::ParamVector scenario_theta() {
  const double l1 = std::log(0.1 / 0.9);
  const double slope = std::log(0.9 / 0.1) - l1;
  twophase::ParamVector t;
  t.beta = 0.3;
  t.eta_ystar = (Eigen::VectorXd(4) << l1, 0.275, slope, 0.275).finished();
  t.eta_xstar = (Eigen::VectorXd(3) << l1, 0.45, slope).finished();
  t.eta_y = (Eigen::VectorXd(1) << std::log(0.3 / 0.7)).finished();
  t.eta_x = (Eigen::VectorXd(1) << l1).finished();
  return t;
}

inline twophase::ParamVector random_theta(std::mt19937_64& rng, const twophase::ModelSpec& spec, double scale = 1.5) {
  std::uniform_real_distribution<double> u(-scale, scale);
  Eigen::VectorXd flat(spec.num_parameters());
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) = u(rng);
  Eigen::VectorXd pz;
  if (spec.num_z_levels() > 1) {
    std::uniform_real_distribution<double> w(0.2, 0.8);
    const double p = w(rng);
    pz = Eigen::Vector2d(1.0 - p, p);
  }
  return twophase::ParamVector::unflatten(spec, flat, pz);
}

inline oracle::VectorL to_long(const Eigen::VectorXd& v) { return v.cast<long double>(); }

}  // namespace testing
