#include "twophase/requests.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace twophase {
namespace {

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorKind::InvalidArgument, what); }

int required_int(const json& j, const char* key) {
  if (!j.contains(key)) invalid(std::string("missing field '") + key + "'");
  if (!j.at(key).is_number_integer()) invalid(std::string(key) + " must be an integer");
  return j.at(key).get<int>();
}

std::uint64_t seed_of(const json& j) {
  if (!j.contains("seed")) return 1;
  const json& s = j.at("seed");
  if (!s.is_number_integer() || s.get<long long>() < 0) invalid("seed must be a non-negative integer");
  return s.get<std::uint64_t>();
}

int z_levels_of(const StratumTable& strata) {
  int levels = 1;
  for (const auto& key : strata.keys()) levels = std::max(levels, key.z + 1);
  return levels;
}

}  // namespace

int http_status(ErrorKind kind) noexcept {
  if (is_numeric_failure(kind)) return 422;
  switch (kind) {
    case ErrorKind::NotFound: return 404;
    case ErrorKind::IllegalTransition:
    case ErrorKind::VersionConflict:
    case ErrorKind::CapacityExceeded:
    case ErrorKind::Cancelled:
      return 409;
    default:
      return 400;
  }
}

int exit_code(ErrorKind kind) noexcept { return is_numeric_failure(kind) ? 3 : 2; }

ModelSpec model_for(const json& params, const StratumTable& strata) {
  if (params.is_object() && params.contains("model")) return model_from_json(params.at("model"));
  const int levels = z_levels_of(strata);
  return levels == 1 ? ModelSpec::main_effects() : ModelSpec::main_effects(ModelSpec::indicator_levels(levels));
}

json run_design(const json& request, const ComputeControl& control) {
  if (!request.is_object()) invalid("design request must be an object");
  if (!request.contains("strata")) invalid("missing field 'strata'");
  const StratumTable strata = strata_from_json(request.at("strata"));
  const int n = required_int(request, "n");
  if (n <= 0) invalid("n must be positive");
  if (!request.contains("strategy") || !request.at("strategy").is_string()) invalid("missing field 'strategy'");
  const Strategy strategy = parse_strategy(request.at("strategy").get<std::string>());
  const GridSchedule schedule = schedule_from_json(request);
  const Weighting weighting = weighting_from_json(request);
  const std::uint64_t seed = seed_of(request);

  std::optional<ModelSpec> spec;
  std::optional<ParamVector> theta;
  if (request.contains("params") && !request.at("params").is_null()) {
    const json& params = request.at("params");
    spec = model_for(params, strata);
    if (!params.contains("theta")) invalid("params must contain 'theta'");
    theta = params_from_json(params.at("theta"), *spec);
  }
  if (strategy == Strategy::OptMLE && !theta) invalid("strategy optmle requires params");
  if (n > strata.total()) throw Error(ErrorKind::InfeasibleBudget, "n exceeds the Phase I size");

  json out = {{"strategy", to_string(strategy)}, {"n", n}};
  Design design;
  std::optional<double> variance;
  json trace = nullptr;
  switch (strategy) {
    case Strategy::SRS: design = srs_design(strata, n, seed); break;
    case Strategy::CCStar: design = cc_star_design(strata, n, seed); break;
    case Strategy::BCCStar: design = bcc_star_design(strata, n); break;
    case Strategy::OptMLE: {
      SearchOptions options;
      options.threads = control.threads;
      if (control.progress || control.cancel) {
        options.progress = [&control](const SearchProgress& p) {
          if (control.cancel && control.cancel->load()) throw Error(ErrorKind::Cancelled, "job cancelled");
          if (control.progress) control.progress(p);
        };
      }
      SearchTrace t = opt_mle_design(*theta, *spec, strata, n, schedule, weighting, options);
      design = t.design;
      variance = t.variance;
      trace = to_json(t);
      break;
    }
  }
  if (!variance && theta) {
    try {
      variance = var_beta(*theta, *spec, design, weighting);
    } catch (const Error& e) {
      if (!is_numeric_failure(e.kind())) throw;
      out["variance_error"] = error_json(e.kind(), e.what())["error"];
    }
  }
  out["design"] = to_json(design);
  out["variance"] = variance ? json(*variance) : json(nullptr);
  out["trace"] = trace;
  return out;
}

json run_fit(const json& request) {
  if (!request.is_object()) invalid("fit request must be an object");
  std::vector<Record> records;
  if (request.contains("records")) {
    for (const auto& r : request.at("records")) records.push_back(record_from_json(r));
  } else if (request.contains("csv")) {
    std::istringstream in(request.at("csv").get<std::string>());
    records = read_records_csv(in);
  } else {
    invalid("fit request needs 'records' or 'csv'");
  }
  Dataset data{model_for(request, tabulate_strata(records)), std::move(records)};
  data.validate(true);

  FitOptions options;
  options.compute_information = true;
  if (request.contains("allow_boundary_nuisance")) {
    options.allow_boundary_nuisance = request.at("allow_boundary_nuisance").get<bool>();
  }
  if (request.contains("max_iterations")) options.max_iterations = required_int(request, "max_iterations");
  std::optional<ParamVector> init;
  if (request.contains("init") && !request.at("init").is_null()) {
    init = params_from_json(request.at("init"), data.spec);
  }
  const FitResult fit = fit_mle(data, init, options);
  json out = to_json(fit, data.spec);
  out["model"] = to_json(data.spec);
  out["n_records"] = data.records.size();
  out["n_validated"] = data.validated_count();
  out["se_beta"] = nullptr;
  if (fit.information_at_mle) {
    // Boundary coefficients are fixed, so only the free block is inverted.
    const auto names = data.spec.parameter_names();
    std::vector<Eigen::Index> free;
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (std::find(fit.boundary.begin(), fit.boundary.end(), names[i]) == fit.boundary.end()) {
        free.push_back(static_cast<Eigen::Index>(i));
      }
    }
    const Eigen::MatrixXd block = (*fit.information_at_mle)(free, free);
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(block);
    if (ldlt.info() == Eigen::Success && ldlt.isPositive()) {
      Eigen::VectorXd e0 = Eigen::VectorXd::Zero(block.rows());
      e0(0) = 1.0;
      const double v = ldlt.solve(e0)(0);
      if (v > 0.0 && std::isfinite(v)) out["se_beta"] = std::sqrt(v);
    }
  }
  return out;
}

json run_simulate(const json& scenario_doc, unsigned threads) {
  SimScenario scenario = scenario_from_json(scenario_doc);
  if (threads != 0 && !scenario_doc.contains("threads")) scenario.threads = threads;
  const SimulationResult result = run_replicates(scenario);
  json metrics = json::array();
  for (const auto& row : result.metrics) metrics.push_back(to_json(row));
  std::ostringstream m;
  std::ostringstream r;
  write_metrics_csv(m, result.metrics);
  write_replicates_csv(r, result.replicates);
  return {{"scenario", to_json(scenario)}, {"metrics", metrics}, {"metrics_csv", m.str()}, {"replicates_csv", r.str()}};
}

}  // namespace twophase
