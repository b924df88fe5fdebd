#include "twophase/grid_search.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "twophase/error.hpp"
#include "twophase/parallel.hpp"

namespace twophase {
namespace {

__extension__ using u128 = unsigned __int128;
__extension__ using i128 = __int128;
constexpr std::uint64_t kSaturated = std::numeric_limits<std::uint64_t>::max();

bool lexicographically_less(const Eigen::VectorXi& a, const Eigen::VectorXi& b) {
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

// Units of `step` above the lower bound: sum j_k = units, 0 <= j_k <= cap_k.
struct Reduced {
  bool feasible = false;
  long long units = 0;
  std::vector<long long> cap;
};

Reduced reduce(const Bounds& bounds, int step, long long total) {
  if (step <= 0) throw Error(ErrorKind::InvalidArgument, "step must be positive");
  if (bounds.lower.size() != bounds.upper.size()) {
    throw Error(ErrorKind::InvalidArgument, "lower and upper bounds differ in length");
  }
  Reduced r;
  long long rest = total;
  r.cap.reserve(static_cast<std::size_t>(bounds.size()));
  for (int k = 0; k < bounds.size(); ++k) {
    if (bounds.lower(k) > bounds.upper(k)) return r;
    rest -= bounds.lower(k);
    r.cap.push_back((bounds.upper(k) - bounds.lower(k)) / step);
  }
  if (rest < 0 || rest % step != 0) return r;
  r.units = rest / step;
  if (r.units > std::accumulate(r.cap.begin(), r.cap.end(), 0LL)) return r;
  r.feasible = true;
  return r;
}

// Inclusion-exclusion over the set of violated caps; exact while every term
// fits, which the caller guarantees by bounding the leading term.
i128 inclusion_exclusion(const std::vector<long long>& cap, std::size_t from, long long units, int parts,
                             int sign) {
  i128 total = sign * static_cast<i128>(binomial(static_cast<std::uint64_t>(units + parts - 1),
                                                         static_cast<std::uint64_t>(parts - 1)));
  for (std::size_t k = from; k < cap.size(); ++k) {
    const long long rest = units - (cap[k] + 1);
    if (rest < 0) continue;
    total += inclusion_exclusion(cap, k + 1, rest, parts, -sign);
  }
  return total;
}

// Saturating dynamic program; entries hold min(count, kCap) exactly.
std::uint64_t composition_dp(const std::vector<long long>& cap, long long units) {
  constexpr u128 kCap = static_cast<u128>(1) << 90;
  std::vector<u128> ways(static_cast<std::size_t>(units) + 1, 0), prefix(ways.size() + 1, 0);
  ways[0] = 1;
  for (long long c : cap) {
    for (std::size_t j = 0; j < ways.size(); ++j) prefix[j + 1] = prefix[j] + ways[j];
    for (std::size_t j = 0; j < ways.size(); ++j) {
      const std::size_t lo = j > static_cast<std::size_t>(c) ? j - static_cast<std::size_t>(c) : 0;
      ways[j] = std::min(prefix[j + 1] - prefix[lo], kCap);
    }
  }
  const u128 out = ways.back();
  return out > kSaturated ? kSaturated : static_cast<std::uint64_t>(out);
}

Eigen::VectorXi lattice_row(const Bounds& bounds, int step, const std::vector<long long>& units) {
  Eigen::VectorXi row(bounds.size());
  for (int k = 0; k < bounds.size(); ++k) row(k) = bounds.lower(k) + static_cast<int>(units[k]) * step;
  return row;
}

}  // namespace

bool Bounds::contains(const Eigen::VectorXi& allocation) const {
  return allocation.size() == lower.size() && (allocation.array() >= lower.array()).all() &&
         (allocation.array() <= upper.array()).all();
}

std::uint64_t binomial(std::uint64_t n, std::uint64_t k) {
  if (k > n) return 0;
  k = std::min(k, n - k);
  u128 c = 1;
  for (std::uint64_t i = 0; i < k; ++i) {
    // c * (n - i) / (i + 1) is exact: c * (n - i) is divisible by i + 1.
    c = c * (n - i) / (i + 1);
    if (c > kSaturated) return kSaturated;
  }
  return static_cast<std::uint64_t>(c);
}

std::uint64_t bounded_composition_count(const Bounds& bounds, int step, long long total) {
  const Reduced r = reduce(bounds, step, total);
  if (!r.feasible) return 0;
  const int parts = bounds.size();
  if (parts == 0) return r.units == 0 ? 1 : 0;
  if (r.units > 1'000'000'000LL) throw Error(ErrorKind::InvalidArgument, "grid lattice too fine to count");
  const std::uint64_t leading =
      binomial(static_cast<std::uint64_t>(r.units + parts - 1), static_cast<std::uint64_t>(parts - 1));
  if (leading < kSaturated && parts <= 20) {
    const i128 count = inclusion_exclusion(r.cap, 0, r.units, parts, 1);
    return static_cast<std::uint64_t>(count);
  }
  return composition_dp(r.cap, r.units);
}

std::uint64_t first_grid_row_count(int n, int K, int m, int step) {
  if (K < 1) throw Error(ErrorKind::InvalidArgument, "K must be at least 1");
  if (m < 0 || step < 1) throw Error(ErrorKind::InvalidArgument, "m must be non-negative and step positive");
  const long long span = static_cast<long long>(n) - static_cast<long long>(K) * m;
  if (span < 0) throw Error(ErrorKind::InfeasibleBudget, "n is smaller than K * m");
  if (span % step != 0) {
    throw Error(ErrorKind::NonDivisibleStep,
                "step " + std::to_string(step) + " does not divide n - K*m = " + std::to_string(span));
  }
  return binomial(static_cast<std::uint64_t>(span / step + K - 1), static_cast<std::uint64_t>(K - 1));
}

std::uint64_t neighborhood_row_count(const Eigen::VectorXi& prev_best, int prev_step, int step, int m,
                                     const StratumTable& strata, int n) {
  if (step < 1 || prev_step < 0) throw Error(ErrorKind::InvalidArgument, "steps must be positive");
  if (prev_step > 0 && prev_step % step != 0) {
    throw Error(ErrorKind::NonDivisibleStep, "step must divide the previous step");
  }
  const Bounds b = neighborhood_bounds(prev_best, prev_step, allocation_floor(strata, m), strata.counts());
  return bounded_composition_count(b, step, n);
}

Eigen::VectorXi allocation_floor(const StratumTable& strata, int m, const Eigen::VectorXi& lower) {
  if (m < 0) throw Error(ErrorKind::InvalidArgument, "m must be non-negative");
  if (lower.size() != 0 && lower.size() != strata.size()) {
    throw Error(ErrorKind::InvalidArgument, "lower bounds must have one entry per stratum");
  }
  Eigen::VectorXi floor(strata.size());
  for (int k = 0; k < strata.size(); ++k) {
    floor(k) = std::min(m, strata.count(k));
    if (lower.size() != 0) {
      if (lower(k) < 0 || lower(k) > strata.count(k)) {
        throw Error(ErrorKind::InvalidArgument, "lower bound for stratum " + std::to_string(k) + " outside [0, N_k]");
      }
      floor(k) = std::max(floor(k), lower(k));
    }
  }
  return floor;
}

Bounds first_grid_bounds(const StratumTable& strata, int n, int m, const Eigen::VectorXi& lower) {
  Bounds b;
  b.lower = allocation_floor(strata, m, lower);
  const int slack = n - b.lower.sum();
  if (slack < 0) throw Error(ErrorKind::InfeasibleBudget, "n is below the sum of per-stratum minimums");
  b.upper = (b.lower.array() + slack).min(strata.counts().array()).matrix();
  return b;
}

Bounds neighborhood_bounds(const Eigen::VectorXi& prev_best, int prev_step, const Eigen::VectorXi& floor,
                           const Eigen::VectorXi& capacity) {
  if (prev_best.size() != floor.size() || capacity.size() != floor.size()) {
    throw Error(ErrorKind::InvalidArgument, "allocation length must equal the number of strata");
  }
  Bounds b;
  b.lower = (prev_best.array() - prev_step).max(floor.array()).matrix();
  b.upper = (prev_best.array() + prev_step).min(capacity.array()).matrix();
  return b;
}

Grid enumerate_grid(const Bounds& bounds, int step, int n) {
  const std::uint64_t count = bounded_composition_count(bounds, step, n);
  const int K = bounds.size();
  if (count > static_cast<std::uint64_t>(std::numeric_limits<int>::max())) {
    throw Error(ErrorKind::InvalidArgument, "grid has too many rows to enumerate");
  }
  Grid grid(static_cast<Eigen::Index>(count), K);
  if (count == 0) return grid;
  const Reduced r = reduce(bounds, step, n);
  std::vector<long long> suffix(static_cast<std::size_t>(K) + 1, 0);
  for (int k = K - 1; k >= 0; --k) suffix[k] = suffix[k + 1] + r.cap[k];

  std::vector<long long> units(static_cast<std::size_t>(K), 0);
  Eigen::Index row = 0;
  // Depth-first in ascending order of each coordinate gives lexicographic rows.
  auto fill = [&](auto&& self, int k, long long rest) -> void {
    if (k == K - 1) {
      units[k] = rest;
      grid.row(row++) = lattice_row(bounds, step, units).transpose();
      return;
    }
    const long long lo = std::max(0LL, rest - suffix[k + 1]);
    const long long hi = std::min(r.cap[k], rest);
    for (long long j = lo; j <= hi; ++j) {
      units[k] = j;
      self(self, k + 1, rest - j);
    }
  };
  fill(fill, 0, r.units);
  return grid;
}

std::vector<int> candidate_steps(int span) {
  if (span <= 1) return {1};
  std::vector<int> chain;
  int v = span;
  bool prime = true;
  while (v > 1) {
    int p = 2;
    while (static_cast<long long>(p) * p <= v && v % p != 0) ++p;
    if (static_cast<long long>(p) * p > v) p = v;
    if (v == span && p != span) prime = false;
    v /= p;
    chain.push_back(v);
  }
  if (prime) chain.insert(chain.begin(), span);
  return chain;
}

void GridSchedule::validate() const {
  if (m < 0) throw Error(ErrorKind::InvalidArgument, "m must be non-negative");
  if (max_rows == 0) throw Error(ErrorKind::InvalidArgument, "max_rows must be positive");
  if (early_stop_rel_change && !(*early_stop_rel_change >= 0.0)) {
    throw Error(ErrorKind::InvalidArgument, "early_stop_rel_change must be non-negative");
  }
  if (steps.empty()) return;
  if (steps.back() != 1) throw Error(ErrorKind::InvalidArgument, "the last step must be 1");
  for (std::size_t i = 0; i < steps.size(); ++i) {
    if (steps[i] < 1) throw Error(ErrorKind::InvalidArgument, "steps must be positive");
    if (i > 0 && (steps[i] >= steps[i - 1] || steps[i - 1] % steps[i] != 0)) {
      throw Error(ErrorKind::InvalidArgument, "each step must be smaller than and divide its predecessor");
    }
  }
}

GridSchedule choose_step_schedule(int n, int K, int m, std::uint64_t max_rows, const StratumTable& strata,
                                  const Eigen::VectorXi& lower) {
  if (K != strata.size()) throw Error(ErrorKind::InvalidArgument, "K must equal the number of strata");
  if (n > strata.total()) throw Error(ErrorKind::InfeasibleBudget, "n exceeds the Phase I size");
  const Bounds bounds = first_grid_bounds(strata, n, m, lower);
  const std::vector<int> chain = candidate_steps(n - bounds.lower.sum());
  std::optional<std::size_t> chosen;
  for (std::size_t i = 0; i < chain.size(); ++i) {
    if (bounded_composition_count(bounds, chain[i], n) <= max_rows) chosen = i;
  }
  if (!chosen) {
    throw Error(ErrorKind::InfeasibleBudget,
                "the coarsest grid (step " + std::to_string(chain.front()) + ") exceeds max_rows");
  }
  GridSchedule schedule;
  schedule.m = m;
  schedule.max_rows = max_rows;
  schedule.steps.assign(chain.begin() + static_cast<std::ptrdiff_t>(*chosen), chain.end());
  schedule.refine_steps = true;
  return schedule;
}

int next_step(const std::vector<int>& candidates, const Eigen::VectorXi& prev_best, int prev_step,
              const Eigen::VectorXi& floor, const Eigen::VectorXi& capacity, int n, std::uint64_t max_rows) {
  std::vector<int> below;
  for (int s : candidates) {
    if (s >= 1 && s < prev_step && prev_step % s == 0) below.push_back(s);
  }
  if (below.empty()) return 1;
  std::sort(below.begin(), below.end(), std::greater<>());
  const Bounds b = neighborhood_bounds(prev_best, prev_step, floor, capacity);
  int chosen = below.front();
  for (int s : below) {
    if (bounded_composition_count(b, s, n) <= max_rows) chosen = s;
  }
  return chosen;
}

double quantile_sorted(const std::vector<double>& sorted, double p) {
  if (sorted.empty()) return std::numeric_limits<double>::quiet_NaN();
  const double h = (static_cast<double>(sorted.size()) - 1.0) * p;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

SearchTrace adaptive_grid_search(const InformationModel& model, int n, const GridSchedule& schedule,
                                 const SearchOptions& options) {
  schedule.validate();
  const StratumTable& strata = model.strata();
  const int K = strata.size();
  const Eigen::VectorXi floor = allocation_floor(strata, schedule.m, options.lower_bounds);
  const Eigen::VectorXi& capacity = strata.counts();
  if (n < floor.sum() || n > strata.total()) {
    throw Error(ErrorKind::InfeasibleBudget, "n must lie between the sum of per-stratum minimums and N");
  }

  GridSchedule plan = schedule;
  if (plan.steps.empty()) {
    plan = choose_step_schedule(n, K, schedule.m, schedule.max_rows, strata, options.lower_bounds);
    plan.early_stop_rel_change = schedule.early_stop_rel_change;
  }
  const int span = n - floor.sum();
  if (span % plan.steps.front() != 0) {
    throw Error(ErrorKind::NonDivisibleStep, "first step " + std::to_string(plan.steps.front()) +
                                                 " does not divide the free budget " + std::to_string(span));
  }

  SearchTrace trace;
  Eigen::VectorXi best;
  double best_var = 0.0;
  int step = plan.steps.front();
  for (std::size_t t = 0;; ++t) {
    SearchIteration it;
    if (t == 0) {
      it.bounds = first_grid_bounds(strata, n, schedule.m, options.lower_bounds);
    } else {
      const int prev_step = step;
      step = plan.refine_steps ? next_step(plan.steps, best, prev_step, floor, capacity, n, plan.max_rows)
                               : plan.steps[t];
      it.bounds = neighborhood_bounds(best, prev_step, floor, capacity);
    }
    it.step = step;
    if (bounded_composition_count(it.bounds, step, n) > options.max_enumerated_rows) {
      throw Error(ErrorKind::InfeasibleBudget, "grid at step " + std::to_string(step) + " is too large");
    }
    const Grid grid = enumerate_grid(it.bounds, step, n);
    std::vector<Eigen::VectorXi> rows;
    rows.reserve(static_cast<std::size_t>(grid.rows()) + 1);
    bool has_prev = t == 0;
    for (Eigen::Index r = 0; r < grid.rows(); ++r) {
      rows.emplace_back(grid.row(r).transpose());
      if (!has_prev && rows.back() == best) has_prev = true;
    }
    // The previous best can fall off the lattice after clamping; keep it.
    if (!has_prev) rows.push_back(best);
    it.rows = rows.size();

    std::vector<double> variance(rows.size(), std::numeric_limits<double>::quiet_NaN());
    // Blocks bound the latency of progress reports (and of cancellation, which
    // the callback signals by throwing).
    constexpr std::size_t block = 1 << 16;
    if (options.progress) options.progress({static_cast<int>(t), step, 0, it.rows});
    for (std::size_t first = 0; first < rows.size(); first += block) {
      const std::size_t last = std::min(rows.size(), first + block);
      parallel_for(last - first, options.threads, [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = first + begin; i < first + end; ++i) {
          try {
            variance[i] = model.var_beta(rows[i].cast<double>());
          } catch (const Error& e) {
            if (e.kind() != ErrorKind::SingularInformation && e.kind() != ErrorKind::DegenerateStratum) throw;
          }
        }
      });
      if (options.progress) options.progress({static_cast<int>(t), step, last, it.rows});
    }

    std::vector<std::size_t> order;
    order.reserve(rows.size());
    std::vector<double> finite;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (std::isfinite(variance[i])) {
        order.push_back(i);
        finite.push_back(variance[i]);
      }
    }
    it.skipped = rows.size() - order.size();
    if (order.empty()) {
      throw Error(ErrorKind::NoFeasibleDesign,
                  "every candidate at step " + std::to_string(step) + " has singular information");
    }
    auto better = [&](std::size_t a, std::size_t b) {
      if (variance[a] != variance[b]) return variance[a] < variance[b];
      return lexicographically_less(rows[a], rows[b]);
    };
    const std::size_t keep = std::min<std::size_t>(order.size(), static_cast<std::size_t>(std::max(options.top_k, 1)));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
    for (std::size_t i = 0; i < keep && i < static_cast<std::size_t>(options.top_k); ++i) {
      it.top.push_back({rows[order[i]], variance[order[i]]});
    }
    std::sort(finite.begin(), finite.end());
    it.summary = {finite.front(), quantile_sorted(finite, 0.25), quantile_sorted(finite, 0.5),
                  quantile_sorted(finite, 0.75), finite.back()};

    const double prev_var = best_var;
    best = rows[order.front()];
    best_var = variance[order.front()];
    if (t > 0 && best_var > prev_var) {
      throw Error(ErrorKind::InvalidArgument, "internal: best variance increased across iterations");
    }
    it.best_allocation = best;
    it.best_variance = best_var;
    trace.iterations.push_back(std::move(it));

    if (t > 0 && plan.early_stop_rel_change && (prev_var - best_var) / prev_var < *plan.early_stop_rel_change) {
      trace.early_stopped = step != 1;
      break;
    }
    if (step == 1) break;
    if (!plan.refine_steps && t + 1 >= plan.steps.size()) break;
  }
  trace.design = Design{strata, best};
  trace.variance = best_var;
  return trace;
}

SearchTrace adaptive_grid_search(const ParamVector& theta, const ModelSpec& spec, const StratumTable& strata, int n,
                                 const GridSchedule& schedule, Weighting weighting, const SearchOptions& options) {
  const InformationModel model(spec, theta, strata, weighting);
  return adaptive_grid_search(model, n, schedule, options);
}

}  // namespace twophase
