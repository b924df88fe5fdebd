#include "twophase/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>
#include <random>
#include <utility>

#include "twophase/designs.hpp"
#include "twophase/error.hpp"
#include "twophase/grid_search.hpp"
#include "twophase/parallel.hpp"
#include "twophase/random.hpp"

namespace twophase {
namespace {

const std::vector<std::string> kDesignNames{"optmle", "optmle2", "optmle3", "bccstar", "ccstar", "srs"};

Term term(Variable v) { return Term::of(v); }
Term zterm() { return Term::of(Variable::Z, 0); }

using Coefficients = std::vector<std::pair<Term, double>>;

std::array<Coefficients, 4> generating_coefficients(const SimScenario& sc) {
  const auto ys = fpr_tpr_to_coefficients(sc.ystar_errors);
  const auto xs = fpr_tpr_to_coefficients(sc.xstar_errors);
  std::array<Coefficients, 4> c;
  c[index(SubModel::OutcomeMisclassification)] = {{Term::intercept(), ys.intercept},
                                                   {term(Variable::XStar), sc.ystar_on_xstar},
                                                   {term(Variable::Y), ys.slope},
                                                   {term(Variable::X), sc.ystar_on_x}};
  c[index(SubModel::ExposureMisclassification)] = {
      {Term::intercept(), xs.intercept}, {term(Variable::Y), sc.xstar_on_y}, {term(Variable::X), xs.slope}};
  c[index(SubModel::Outcome)] = {{Term::intercept(), prevalence_to_intercept(sc.p_y0)}, {term(Variable::X), sc.beta}};
  c[index(SubModel::Exposure)] = {{Term::intercept(), prevalence_to_intercept(sc.p_x)}};
  if (const auto& cov = sc.covariate) {
    c[index(SubModel::OutcomeMisclassification)].emplace_back(zterm(), cov->lambda);
    c[index(SubModel::OutcomeMisclassification)].emplace_back(term(Variable::X) * zterm(), cov->delta_ystar);
    c[index(SubModel::ExposureMisclassification)].emplace_back(zterm(), cov->lambda);
    c[index(SubModel::ExposureMisclassification)].emplace_back(term(Variable::X) * zterm(), cov->delta_xstar);
    c[index(SubModel::Outcome)].emplace_back(zterm(), cov->beta_z);
    c[index(SubModel::Exposure)].emplace_back(zterm(), cov->x_z);
  }
  return c;
}

double coefficient_of(const Coefficients& c, const Term& t) {
  for (const auto& [term, value] : c) {
    if (term == t) return value;
  }
  return 0.0;
}

void add_interactions(ModelSpec& spec) {
  const Term xz = term(Variable::X) * zterm();
  spec.terms_for(SubModel::OutcomeMisclassification).push_back(xz);
  spec.terms_for(SubModel::ExposureMisclassification).push_back(xz);
}

bool bernoulli(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

// Indices of validated records for one design; the multi-wave designs fit internally.
struct DesignRun {
  std::vector<std::size_t> validated;
  std::optional<double> beta_hat;
};

}  // namespace

void SimScenario::validate() const {
  auto in_unit = [](double p) { return p > 0.0 && p < 1.0; };
  if (!(N > 0 && n > 0 && n <= N)) throw Error(ErrorKind::InvalidArgument, "scenario needs 0 < n <= N");
  if (m < 0) throw Error(ErrorKind::InvalidArgument, "m must be non-negative");
  if (replicates < 1) throw Error(ErrorKind::InvalidArgument, "replicates must be positive");
  if (!in_unit(p_y0) || !in_unit(p_x)) throw Error(ErrorKind::InvalidArgument, "p_y0 and p_x must lie in (0, 1)");
  if (!std::isfinite(beta)) throw Error(ErrorKind::InvalidArgument, "beta must be finite");
  fpr_tpr_to_coefficients(ystar_errors);
  fpr_tpr_to_coefficients(xstar_errors);
  if (covariate && !in_unit(covariate->p_z)) throw Error(ErrorKind::InvalidArgument, "p_z must lie in (0, 1)");
  if (designs.empty()) throw Error(ErrorKind::InvalidArgument, "scenario lists no designs");
  for (const auto& d : designs) {
    if (std::find(kDesignNames.begin(), kDesignNames.end(), d) == kDesignNames.end()) {
      throw Error(ErrorKind::InvalidArgument, "unknown design '" + d + "'");
    }
  }
}

std::string SimScenario::reference_design() const {
  return std::find(designs.begin(), designs.end(), "optmle") != designs.end() ? "optmle" : designs.front();
}

ModelSpec generating_spec(const SimScenario& scenario) {
  ModelSpec spec = scenario.covariate ? ModelSpec::main_effects(ModelSpec::indicator_levels(2)) : ModelSpec::main_effects();
  if (scenario.covariate) add_interactions(spec);
  return spec;
}

ModelSpec fitting_spec(const SimScenario& scenario) {
  ModelSpec spec = scenario.covariate ? ModelSpec::main_effects(ModelSpec::indicator_levels(2)) : ModelSpec::main_effects();
  if (scenario.covariate && scenario.covariate->interaction_in_model) add_interactions(spec);
  return spec;
}

ParamVector scenario_parameters(const SimScenario& scenario, const ModelSpec& spec) {
  const auto coef = generating_coefficients(scenario);
  ParamVector theta = zero_parameters(spec);
  auto fill = [&](SubModel s, Eigen::VectorXd& block) {
    const auto& terms = spec.terms_for(s);
    for (std::size_t j = 0; j < terms.size(); ++j) {
      block(static_cast<Eigen::Index>(j)) = coefficient_of(coef[index(s)], terms[j]);
    }
  };
  fill(SubModel::OutcomeMisclassification, theta.eta_ystar);
  fill(SubModel::ExposureMisclassification, theta.eta_xstar);
  fill(SubModel::Exposure, theta.eta_x);
  const auto& yterms = spec.terms_for(SubModel::Outcome);
  Eigen::Index k = 0;
  for (std::size_t j = 0; j < yterms.size(); ++j) {
    const double value = coefficient_of(coef[index(SubModel::Outcome)], yterms[j]);
    if (static_cast<int>(j) == spec.beta_term()) {
      theta.beta = value;
    } else {
      theta.eta_y(k++) = value;
    }
  }
  if (scenario.covariate) {
    theta.z_marginal = Eigen::Vector2d(1.0 - scenario.covariate->p_z, scenario.covariate->p_z);
  } else {
    theta.z_marginal = Eigen::VectorXd::Ones(1);
  }
  return theta;
}

Cohort generate_cohort(const SimScenario& scenario, std::uint64_t seed) {
  scenario.validate();
  const ModelSpec gen = generating_spec(scenario);
  const ParamVector theta = scenario_parameters(scenario, gen);
  std::mt19937_64 rng(seed);
  Cohort c;
  c.truth.spec = fitting_spec(scenario);
  c.truth.records.reserve(static_cast<std::size_t>(scenario.N));
  auto draw = [&](SubModel s, const Cell& cell, int z) {
    return bernoulli(rng, logistic(linear_predictor(theta, gen, s, cell, z))) ? 1 : 0;
  };
  for (int i = 0; i < scenario.N; ++i) {
    const int z = scenario.covariate && bernoulli(rng, scenario.covariate->p_z) ? 1 : 0;
    Cell cell;
    cell.x = draw(SubModel::Exposure, cell, z);
    cell.y = draw(SubModel::Outcome, cell, z);
    cell.xstar = draw(SubModel::ExposureMisclassification, cell, z);
    cell.ystar = draw(SubModel::OutcomeMisclassification, cell, z);
    c.truth.records.push_back({1, cell.ystar, cell.xstar, cell.y, cell.x, z});
  }
  c.strata = tabulate_strata(c.truth.records);
  return c;
}

Dataset mask_unvalidated(const Dataset& truth, const std::vector<std::size_t>& validated) {
  Dataset out = truth;
  std::size_t next = 0;
  for (std::size_t i = 0; i < out.records.size(); ++i) {
    Record& r = out.records[i];
    if (next < validated.size() && validated[next] == i) {
      r.v = 1;
      ++next;
    } else {
      r.v = 0;
      r.y.reset();
      r.x.reset();
    }
  }
  return out;
}

SimulationResult run_replicates(const SimScenario& scenario) {
  scenario.validate();
  const ModelSpec spec = fitting_spec(scenario);
  const ParamVector theta_true = scenario_parameters(scenario, spec);
  FitOptions fit_options;
  fit_options.allow_boundary_nuisance = scenario.allow_boundary_nuisance;
  GridSchedule schedule;
  schedule.m = scenario.m;
  schedule.max_rows = scenario.max_rows;

  const std::size_t D = scenario.designs.size();
  std::vector<ReplicateOutcome> outcomes(static_cast<std::size_t>(scenario.replicates) * D);
  parallel_for(static_cast<std::size_t>(scenario.replicates), scenario.threads, [&](std::size_t begin, std::size_t end) {
    for (std::size_t r = begin; r < end; ++r) {
      const std::uint64_t rep_seed = mix_seed(scenario.seed, r);
      const Cohort cohort = generate_cohort(scenario, rep_seed);
      const auto index = index_strata(cohort.truth.records, cohort.strata);
      const std::vector<bool> none(cohort.truth.records.size(), false);
      SearchOptions search;
      search.threads = 1;
      for (std::size_t j = 0; j < D; ++j) {
        const std::string& name = scenario.designs[j];
        const std::uint64_t seed = mix_seed(rep_seed, j + 1);
        ReplicateOutcome& out = outcomes[r * D + j];
        out.replicate = static_cast<int>(r);
        out.design = name;
        out.beta_hat = std::numeric_limits<double>::quiet_NaN();
        try {
          DesignRun run;
          if (name == "optmle2" || name == "optmle3") {
            MultiwaveConfig config;
            config.n = scenario.n;
            config.waves = name == "optmle2" ? 2 : 3;
            config.schedule = schedule;
            config.seed = seed;
            config.threads = 1;
            config.fit = fit_options;
            const auto& truth = cohort.truth.records;
            const auto result = multiwave_optimal(
                mask_unvalidated(cohort.truth, {}),
                [&truth](std::size_t i) { return std::pair<int, int>{*truth[i].y, *truth[i].x}; }, config);
            if (result.plan.fallback_used()) throw Error(ErrorKind::WaveFitFailed, "interim fit failed");
            if (!result.fit.converged) throw Error(ErrorKind::MaxIterations, "final fit did not converge");
            run.beta_hat = result.fit.theta_hat.beta;
          } else {
            Design design;
            if (name == "srs") {
              design = srs_design(cohort.strata, scenario.n, seed);
            } else if (name == "ccstar") {
              design = cc_star_design(cohort.strata, scenario.n, seed);
            } else if (name == "bccstar") {
              design = bcc_star_design(cohort.strata, scenario.n);
            } else {
              design = opt_mle_design(theta_true, spec, cohort.strata, scenario.n, schedule, Weighting::Observed, search)
                           .design;
            }
            run.validated = sample_records(design, index, none, mix_seed(seed, 0));
            const FitResult fit = fit_mle(mask_unvalidated(cohort.truth, run.validated), std::nullopt, fit_options);
            if (!fit.converged) throw Error(ErrorKind::MaxIterations, "fit did not converge");
            run.beta_hat = fit.theta_hat.beta;
          }
          out.beta_hat = *run.beta_hat;
          out.status = "ok";
        } catch (const Error& e) {
          if (!is_numeric_failure(e.kind())) throw;
          out.status = to_string(e.kind());
        }
      }
    }
  });
  SimulationResult result;
  result.metrics = summarize(outcomes, scenario.designs, scenario.reference_design(), scenario.beta);
  result.replicates = std::move(outcomes);
  return result;
}

std::vector<MetricsRow> summarize(const std::vector<ReplicateOutcome>& outcomes, const std::vector<std::string>& designs,
                                  const std::string& reference, double beta) {
  struct Moments {
    std::vector<double> sorted;
    double mean = std::numeric_limits<double>::quiet_NaN();
    double var = std::numeric_limits<double>::quiet_NaN();
    double iqr = std::numeric_limits<double>::quiet_NaN();
    int failures = 0;
  };
  auto moments = [&](const std::string& design) {
    Moments mo;
    for (const auto& o : outcomes) {
      if (o.design != design) continue;
      if (o.status == "ok") {
        mo.sorted.push_back(o.beta_hat);
      } else {
        ++mo.failures;
      }
    }
    // Sorting first makes every sum independent of replicate order.
    std::sort(mo.sorted.begin(), mo.sorted.end());
    const auto n = static_cast<double>(mo.sorted.size());
    if (!mo.sorted.empty()) {
      double s = 0.0;
      for (double b : mo.sorted) s += b;
      mo.mean = s / n;
      mo.iqr = quantile_sorted(mo.sorted, 0.75) - quantile_sorted(mo.sorted, 0.25);
    }
    if (mo.sorted.size() > 1) {
      double ss = 0.0;
      for (double b : mo.sorted) ss += (b - mo.mean) * (b - mo.mean);
      mo.var = ss / (n - 1.0);
    }
    return mo;
  };
  const Moments ref = moments(reference);
  std::vector<MetricsRow> rows;
  for (const auto& d : designs) {
    const Moments mo = moments(d);
    MetricsRow row;
    row.design = d;
    row.successes = static_cast<int>(mo.sorted.size());
    row.failures = mo.failures;
    row.mean = mo.mean;
    row.pct_bias = 100.0 * (mo.mean - beta) / beta;
    row.se = std::sqrt(mo.var);
    row.re = d == reference ? 1.0 : ref.var / mo.var;
    row.ri = d == reference ? 1.0 : ref.iqr / mo.iqr;
    rows.push_back(row);
  }
  return rows;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "design,successes,failures,mean,pct_bias,se,re,ri\n" << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.design << ',' << r.successes << ',' << r.failures << ',' << r.mean << ',' << r.pct_bias << ',' << r.se
        << ',' << r.re << ',' << r.ri << '\n';
  }
}

void write_replicates_csv(std::ostream& out, const std::vector<ReplicateOutcome>& rows) {
  out << "replicate,design,beta_hat,status\n" << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.replicate << ',' << r.design << ',';
    if (r.status == "ok") out << r.beta_hat;
    out << ',' << r.status << '\n';
  }
}

}  // namespace twophase
