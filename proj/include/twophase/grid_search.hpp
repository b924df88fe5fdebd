#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "twophase/information.hpp"
#include "twophase/model.hpp"

namespace twophase {

// Per-stratum inclusive bounds on n_k.
struct Bounds {
  Eigen::VectorXi lower;
  Eigen::VectorXi upper;

  int size() const noexcept { return static_cast<int>(lower.size()); }
  bool contains(const Eigen::VectorXi& allocation) const;
};

// One allocation per row.
using Grid = Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Saturates at UINT64_MAX.
std::uint64_t binomial(std::uint64_t n, std::uint64_t k);

// Number of allocations lb_k + j_k s (lb_k <= . <= ub_k) summing to `total`.
// Saturates at UINT64_MAX.
std::uint64_t bounded_composition_count(const Bounds& bounds, int step, long long total);

// C((n - K m)/s + K - 1, K - 1); throws NonDivisibleStep when s does not divide n - K m.
std::uint64_t first_grid_row_count(int n, int K, int m, int step);

// Size of the step-`step` grid around `prev_best` with half-width `prev_step`,
// floors min(m, N_k) and caps N_k. Zero for infeasible windows.
std::uint64_t neighborhood_row_count(const Eigen::VectorXi& prev_best, int prev_step, int step, int m,
                                     const StratumTable& strata, int n);

// floor_k = max(min(m, N_k), lower_k), the per-stratum minimum. `lower` may be empty.
Eigen::VectorXi allocation_floor(const StratumTable& strata, int m, const Eigen::VectorXi& lower = {});

// [floor_k, min(N_k, floor_k + n - sum floor)].
Bounds first_grid_bounds(const StratumTable& strata, int n, int m, const Eigen::VectorXi& lower = {});
// [max(prev_k - prev_step, floor_k), min(prev_k + prev_step, N_k)].
Bounds neighborhood_bounds(const Eigen::VectorXi& prev_best, int prev_step, const Eigen::VectorXi& floor,
                           const Eigen::VectorXi& capacity);

// Lattice points within bounds summing to n, in lexicographic order.
Grid enumerate_grid(const Bounds& bounds, int step, int n);

// Repeated division of `span` by its smallest prime factor, descending, ending
// in 1. `span` itself is included only when prime.
std::vector<int> candidate_steps(int span);

struct GridSchedule {
  int m = 10;
  std::uint64_t max_rows = 10000;
  std::vector<int> steps;  // empty: derived from the budget
  // Later steps are re-picked from `steps` by neighborhood size.
  bool refine_steps = false;
  std::optional<double> early_stop_rel_change;

  // Throws InvalidArgument on a malformed step list.
  void validate() const;
};

// Picks the finest first step whose grid fits max_rows; the remaining chain
// entries follow as provisional later steps with refine_steps set. Throws
// InfeasibleBudget when no step fits or the budget is outside [sum floor, N].
GridSchedule choose_step_schedule(int n, int K, int m, std::uint64_t max_rows, const StratumTable& strata,
                                  const Eigen::VectorXi& lower = {});

// Finest entry of `candidates` below `prev_step` whose neighborhood fits
// max_rows, else the coarsest such entry.
int next_step(const std::vector<int>& candidates, const Eigen::VectorXi& prev_best, int prev_step,
              const Eigen::VectorXi& floor, const Eigen::VectorXi& capacity, int n, std::uint64_t max_rows);

struct CandidateDesign {
  Eigen::VectorXi allocation;
  double variance = 0.0;
};

struct VarianceSummary {
  double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
};

struct SearchIteration {
  int step = 1;
  std::uint64_t rows = 0;     // grid rows, including a re-inserted previous best
  std::uint64_t skipped = 0;  // candidates with singular information
  Bounds bounds;
  Eigen::VectorXi best_allocation;
  double best_variance = 0.0;
  std::vector<CandidateDesign> top;
  VarianceSummary summary;
};

struct SearchTrace {
  std::vector<SearchIteration> iterations;
  Design design;
  double variance = 0.0;
  bool early_stopped = false;
};

struct SearchProgress {
  int iteration = 0;
  int step = 1;
  std::uint64_t rows_evaluated = 0;
  std::uint64_t rows_total = 0;
};

struct SearchOptions {
  Eigen::VectorXi lower_bounds;  // optional per-stratum minimum (already-validated counts)
  int top_k = 10;
  unsigned threads = 0;  // 0: hardware concurrency
  std::uint64_t max_enumerated_rows = 20'000'000;
  // Called from the calling thread at the start of each grid and after every
  // block of rows; an exception thrown here aborts the search.
  std::function<void(const SearchProgress&)> progress;
};

SearchTrace adaptive_grid_search(const InformationModel& model, int n, const GridSchedule& schedule,
                                 const SearchOptions& options = {});
SearchTrace adaptive_grid_search(const ParamVector& theta, const ModelSpec& spec, const StratumTable& strata, int n,
                                 const GridSchedule& schedule, Weighting weighting = Weighting::Observed,
                                 const SearchOptions& options = {});

// Linear-interpolation quantile of sorted values, p in [0, 1].
double quantile_sorted(const std::vector<double>& sorted, double p);

}  // namespace twophase
