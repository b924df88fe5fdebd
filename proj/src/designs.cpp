#include "twophase/designs.hpp"

#include <algorithm>
#include <array>
#include <numeric>
#include <random>

#include "twophase/error.hpp"
#include "twophase/random.hpp"

namespace twophase {
namespace {

// Floyd's algorithm: n distinct draws from [0, population), ascending.
std::vector<std::size_t> draw_without_replacement(std::size_t population, std::size_t n, std::mt19937_64& rng) {
  std::vector<bool> taken(population, false);
  for (std::size_t j = population - n; j < population; ++j) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
    if (taken[t]) {
      taken[j] = true;
    } else {
      taken[t] = true;
    }
  }
  std::vector<std::size_t> out;
  out.reserve(n);
  for (std::size_t i = 0; i < population; ++i) {
    if (taken[i]) out.push_back(i);
  }
  return out;
}

// Tabulates draws over consecutive blocks of units, one block per listed stratum.
void tabulate_draws(const std::vector<std::size_t>& draws, const std::vector<int>& members, const StratumTable& strata,
                    Eigen::VectorXi& allocation) {
  std::size_t block_end = 0;
  std::size_t m = 0;
  int current = -1;
  for (std::size_t unit : draws) {
    while (unit >= block_end) {
      current = members[m++];
      block_end += static_cast<std::size_t>(strata.count(current));
    }
    ++allocation(current);
  }
}

void check_budget(const StratumTable& strata, int n) {
  strata.validate();
  if (n < 0 || n > strata.total()) throw Error(ErrorKind::InfeasibleBudget, "n must lie in [0, N]");
}

}  // namespace

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::SRS: return "srs";
    case Strategy::CCStar: return "ccstar";
    case Strategy::BCCStar: return "bccstar";
    case Strategy::OptMLE: return "optmle";
  }
  return "unknown";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "srs") return Strategy::SRS;
  if (name == "ccstar") return Strategy::CCStar;
  if (name == "bccstar") return Strategy::BCCStar;
  if (name == "optmle") return Strategy::OptMLE;
  throw Error(ErrorKind::InvalidArgument, "unknown strategy '" + name + "'");
}

Eigen::VectorXi waterfill(const Eigen::VectorXi& capacity, const std::vector<StratumKey>& keys, int n) {
  const int K = static_cast<int>(capacity.size());
  if (static_cast<int>(keys.size()) != K) throw Error(ErrorKind::InvalidArgument, "one key per stratum required");
  if (n < 0 || n > capacity.sum()) throw Error(ErrorKind::InfeasibleBudget, "n exceeds the available capacity");
  Eigen::VectorXi alloc = Eigen::VectorXi::Zero(K);
  int remaining = n;
  while (remaining > 0) {
    std::vector<int> open;
    for (int k = 0; k < K; ++k) {
      if (alloc(k) < capacity(k)) open.push_back(k);
    }
    const int quota = remaining / static_cast<int>(open.size());
    if (quota == 0) {
      std::sort(open.begin(), open.end(), [&](int a, int b) { return keys[b] < keys[a]; });
      for (int i = 0; i < remaining; ++i) ++alloc(open[static_cast<std::size_t>(i)]);
      break;
    }
    for (int k : open) {
      const int add = std::min(quota, capacity(k) - alloc(k));
      alloc(k) += add;
      remaining -= add;
    }
  }
  return alloc;
}

Design srs_design(const StratumTable& strata, int n, std::uint64_t seed) {
  check_budget(strata, n);
  std::mt19937_64 rng(seed);
  std::vector<int> members(static_cast<std::size_t>(strata.size()));
  std::iota(members.begin(), members.end(), 0);
  Design d{strata, Eigen::VectorXi::Zero(strata.size())};
  tabulate_draws(draw_without_replacement(static_cast<std::size_t>(strata.total()), static_cast<std::size_t>(n), rng),
                 members, strata, d.allocation);
  return d;
}

Design cc_star_design(const StratumTable& strata, int n, std::uint64_t seed) {
  check_budget(strata, n);
  std::array<std::vector<int>, 2> group;
  Eigen::VectorXi group_size = Eigen::VectorXi::Zero(2);
  for (int k = 0; k < strata.size(); ++k) {
    group[static_cast<std::size_t>(strata.key(k).ystar)].push_back(k);
    group_size(strata.key(k).ystar) += strata.count(k);
  }
  const Eigen::VectorXi take = waterfill(group_size, {StratumKey{0, 0, 0}, StratumKey{1, 0, 0}}, n);
  std::mt19937_64 rng(seed);
  Design d{strata, Eigen::VectorXi::Zero(strata.size())};
  for (int g = 0; g < 2; ++g) {
    if (take(g) == 0) continue;
    const auto draws = draw_without_replacement(static_cast<std::size_t>(group_size(g)),
                                                static_cast<std::size_t>(take(g)), rng);
    tabulate_draws(draws, group[static_cast<std::size_t>(g)], strata, d.allocation);
  }
  return d;
}

Design bcc_star_design(const StratumTable& strata, int n) {
  check_budget(strata, n);
  return Design{strata, waterfill(strata.counts(), strata.keys(), n)};
}

SearchTrace opt_mle_design(const ParamVector& theta, const ModelSpec& spec, const StratumTable& strata, int n,
                           const GridSchedule& schedule, Weighting weighting, const SearchOptions& options) {
  return adaptive_grid_search(theta, spec, strata, n, schedule, weighting, options);
}

std::vector<std::size_t> sample_records(const Design& design, const std::vector<std::vector<std::size_t>>& strata_index,
                                        const std::vector<bool>& already_validated, std::uint64_t seed) {
  if (design.allocation.size() != static_cast<Eigen::Index>(strata_index.size())) {
    throw Error(ErrorKind::InvalidArgument, "allocation length must equal the number of strata");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < strata_index.size(); ++k) {
    const int want = design.allocation(static_cast<Eigen::Index>(k));
    if (want < 0) throw Error(ErrorKind::InvalidArgument, "allocation must be non-negative");
    std::vector<std::size_t> open;
    for (std::size_t r : strata_index[k]) {
      if (r >= already_validated.size() || !already_validated[r]) open.push_back(r);
    }
    if (static_cast<std::size_t>(want) > open.size()) {
      throw Error(ErrorKind::CapacityExceeded, "stratum " + std::to_string(k) + " has " + std::to_string(open.size()) +
                                                   " unvalidated records, " + std::to_string(want) + " requested");
    }
    for (std::size_t i : draw_without_replacement(open.size(), static_cast<std::size_t>(want), rng)) {
      out.push_back(open[i]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> wave_sizes(int n, int waves) {
  switch (waves) {
    case 1: return {n};
    case 2: return {n / 2, n - n / 2};
    case 3: return {n / 2, n / 4, n - n / 2 - n / 4};
    default: throw Error(ErrorKind::InvalidArgument, "waves must be 1, 2 or 3");
  }
}

bool WavePlan::fallback_used() const {
  return std::any_of(waves.begin(), waves.end(), [](const WaveStep& w) { return !w.fallback_reason.empty(); });
}

WaveStep plan_wave(const ModelSpec& spec, const StratumTable& strata, const Eigen::VectorXi& cumulative, int size,
                   const std::optional<ParamVector>& theta, const GridSchedule& schedule, Weighting weighting,
                   const SearchOptions& options) {
  if (cumulative.size() != strata.size()) {
    throw Error(ErrorKind::InvalidArgument, "cumulative allocation must have one entry per stratum");
  }
  if ((cumulative.array() < 0).any() || (cumulative.array() > strata.counts().array()).any()) {
    throw Error(ErrorKind::InvalidArgument, "cumulative allocation outside [0, N_k]");
  }
  if (size < 0 || cumulative.sum() + size > strata.total()) {
    throw Error(ErrorKind::InfeasibleBudget, "wave size exceeds the unvalidated Phase I records");
  }
  WaveStep step;
  step.size = size;
  if (theta) {
    try {
      SearchOptions o = options;
      o.lower_bounds = cumulative;
      const InformationModel model(spec, *theta, strata, weighting, 1e12);
      SearchTrace trace = adaptive_grid_search(model, cumulative.sum() + size, schedule, o);
      step.strategy = "optmle";
      step.cumulative = trace.design.allocation;
      step.increment = step.cumulative - cumulative;
      step.trace = std::move(trace);
      return step;
    } catch (const Error& e) {
      if (!is_numeric_failure(e.kind()) && e.kind() != ErrorKind::InfeasibleBudget) throw;
      step.fallback_reason = std::string(to_string(e.kind())) + ": " + e.what();
    }
  }
  step.strategy = step.fallback_reason.empty() ? "bccstar" : "bccstar-fallback";
  step.increment = waterfill(strata.counts() - cumulative, strata.keys(), size);
  step.cumulative = cumulative + step.increment;
  return step;
}

MultiwaveResult multiwave_optimal(const Dataset& phase_one, const RevealFn& reveal, const MultiwaveConfig& config) {
  phase_one.validate();
  MultiwaveResult result;
  result.data = phase_one;
  auto& records = result.data.records;
  const StratumTable strata = tabulate_strata(records);
  const auto index = index_strata(records, strata);

  std::vector<bool> validated(records.size(), false);
  Eigen::VectorXi cumulative = Eigen::VectorXi::Zero(strata.size());
  for (std::size_t k = 0; k < index.size(); ++k) {
    for (std::size_t r : index[k]) {
      if (records[r].v == 1) {
        validated[r] = true;
        ++cumulative(static_cast<Eigen::Index>(k));
      }
    }
  }

  WavePlan& plan = result.plan;
  plan.n = config.n;
  plan.sizes = wave_sizes(config.n, config.waves);
  SearchOptions search;
  search.threads = config.threads;

  std::optional<ParamVector> theta = config.prior;
  std::string pending_failure;
  for (std::size_t w = 0; w < plan.sizes.size(); ++w) {
    WaveStep step = plan_wave(result.data.spec, strata, cumulative, plan.sizes[w], theta, config.schedule,
                              config.weighting, search);
    if (!pending_failure.empty()) {
      step.strategy = "bccstar-fallback";
      step.fallback_reason = pending_failure;
    }
    const auto draws = sample_records(Design{strata, step.increment}, index, validated, mix_seed(config.seed, w));
    for (std::size_t r : draws) {
      const auto [y, x] = reveal(r);
      records[r].v = 1;
      records[r].y = y;
      records[r].x = x;
      validated[r] = true;
    }
    cumulative = step.cumulative;

    const bool last = w + 1 == plan.sizes.size();
    FitOptions fit_options = config.fit;
    fit_options.compute_information = last && config.fit.compute_information;
    try {
      FitResult fit = fit_mle(result.data, std::nullopt, fit_options);
      step.theta_hat = fit.theta_hat;
      theta = fit.theta_hat;
      pending_failure.clear();
      if (last) result.fit = std::move(fit);
    } catch (const Error& e) {
      if (last || !is_numeric_failure(e.kind())) throw;
      theta.reset();
      pending_failure = std::string(to_string(ErrorKind::WaveFitFailed)) + ": " + e.what();
    }
    plan.waves.push_back(std::move(step));
  }
  plan.cumulative = cumulative;
  return result;
}

}  // namespace twophase
