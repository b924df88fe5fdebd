#pragma once

// Request handlers shared by the CLI and the HTTP service. Each takes the
// request document and returns the response document; writers serialize it
// with serialize_document so both front ends emit identical bytes.

#include <atomic>
#include <functional>

#include "twophase/serialization.hpp"

namespace twophase {

// HTTP status for an error kind (400, 404, 409 or 422).
int http_status(ErrorKind kind) noexcept;
// CLI exit code: 3 for numeric failures, 2 otherwise.
int exit_code(ErrorKind kind) noexcept;

struct ComputeControl {
  std::function<void(const SearchProgress&)> progress;
  const std::atomic<bool>* cancel = nullptr;  // polled between search iterations
  unsigned threads = 0;
};

// {"strata", "params"?: {"model"?, "theta"}, "n", "m"?, "max_rows"?, "steps"?,
//  "early_stop_rel_change"?, "strategy", "seed"?, "weighting"?}
// -> {"strategy", "n", "design", "variance", "trace"}.
json run_design(const json& request, const ComputeControl& control = {});

// {"model"?, "records": [...] | "csv": "...", "init"?, "allow_boundary_nuisance"?}
// -> FitResult document plus "se_beta".
json run_fit(const json& request);

// Scenario document -> {"scenario", "metrics", "metrics_csv", "replicates_csv"}.
json run_simulate(const json& scenario, unsigned threads = 0);

// Model from an optional "model" member; absent means main effects with one
// indicator-coded level per Z level present in `strata`.
ModelSpec model_for(const json& params, const StratumTable& strata);

}  // namespace twophase
