#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "twophase/grid_search.hpp"
#include "twophase/information.hpp"
#include "twophase/likelihood.hpp"
#include "twophase/model.hpp"

namespace twophase {

enum class Strategy { SRS, CCStar, BCCStar, OptMLE };

std::string to_string(Strategy s);
// Accepts "srs", "ccstar", "bccstar", "optmle".
Strategy parse_strategy(const std::string& name);

// Equal quotas with capacity clamping; leftovers are re-split among strata
// below capacity, and the final remainder goes one unit each in descending
// stratum-key order. Throws InfeasibleBudget when n exceeds the total capacity.
Eigen::VectorXi waterfill(const Eigen::VectorXi& capacity, const std::vector<StratumKey>& keys, int n);

// Uniform draw of n units without replacement, tabulated by stratum.
Design srs_design(const StratumTable& strata, int n, std::uint64_t seed);
// n/2 units drawn uniformly within each Y* group (the Y* = 1 group takes an odd unit).
Design cc_star_design(const StratumTable& strata, int n, std::uint64_t seed);
Design bcc_star_design(const StratumTable& strata, int n);
SearchTrace opt_mle_design(const ParamVector& theta, const ModelSpec& spec, const StratumTable& strata, int n,
                           const GridSchedule& schedule, Weighting weighting = Weighting::Observed,
                           const SearchOptions& options = {});

// Draws design.allocation(k) new record indices from stratum k, uniformly among
// those not yet validated. Returned indices are sorted. Throws CapacityExceeded.
std::vector<std::size_t> sample_records(const Design& design, const std::vector<std::vector<std::size_t>>& strata_index,
                                        const std::vector<bool>& already_validated, std::uint64_t seed);

// Wave sizes: n; n/2, n - n/2; n/2, n/4, rest.
std::vector<int> wave_sizes(int n, int waves);

struct WaveStep {
  std::string strategy;  // "bccstar", "optmle" or "bccstar-fallback"
  int size = 0;
  Eigen::VectorXi increment;
  Eigen::VectorXi cumulative;
  std::optional<SearchTrace> trace;
  std::optional<ParamVector> theta_hat;  // fitted once the wave's data are in
  std::string fallback_reason;
};

struct WavePlan {
  int n = 0;
  std::vector<int> sizes;
  std::vector<WaveStep> waves;
  Eigen::VectorXi cumulative;

  bool fallback_used() const;
};

// Next-wave allocation of `size` units given what is already validated. With a
// parameter estimate the total design is re-optimized with the current counts
// as lower bounds; without one (or when the search fails numerically) the
// increment is a waterfill over the remaining capacity.
WaveStep plan_wave(const ModelSpec& spec, const StratumTable& strata, const Eigen::VectorXi& cumulative, int size,
                   const std::optional<ParamVector>& theta, const GridSchedule& schedule,
                   Weighting weighting = Weighting::Observed, const SearchOptions& options = {});

// Returns (y, x) for a record; models the audit of one subject.
using RevealFn = std::function<std::pair<int, int>(std::size_t record)>;

struct MultiwaveConfig {
  int n = 0;
  int waves = 2;
  std::optional<ParamVector> prior;  // designs the first wave when present
  GridSchedule schedule;
  Weighting weighting = Weighting::Observed;
  std::uint64_t seed = 0;
  FitOptions fit;
  unsigned threads = 0;
};

struct MultiwaveResult {
  WavePlan plan;
  FitResult fit;
  Dataset data;  // Phase I plus everything validated
};

// Runs every wave: plan, sample, reveal, refit. A failed interim fit falls back
// to waterfill allocation for the remaining waves and is recorded on the wave.
// The final fit's errors propagate.
MultiwaveResult multiwave_optimal(const Dataset& phase_one, const RevealFn& reveal, const MultiwaveConfig& config);

}  // namespace twophase
