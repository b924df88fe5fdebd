#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <doctest.h>

#include <random>
#include <set>

#include "support.hpp"
#include "twophase/grid_search.hpp"

using namespace twophase;

namespace {

std::vector<Eigen::VectorXi> rows_of(const Grid& g) {
  std::vector<Eigen::VectorXi> out;
  for (Eigen::Index r = 0; r < g.rows(); ++r) out.push_back(g.row(r).transpose());
  return out;
}

bool lex_less(const Eigen::VectorXi& a, const Eigen::VectorXi& b) {
  return std::lexicographical_compare(a.data(), a.data() + a.size(), b.data(), b.data() + b.size());
}

struct Instance {
  StratumTable strata;
  ParamVector theta;
  int n;
  int m;
};

Instance random_instance(std::mt19937_64& rng) {
  Instance in;
  Eigen::VectorXi counts(4);
  for (auto& c : counts) c = std::uniform_int_distribution<int>(8, 60)(rng);
  in.strata = StratumTable::from_counts(counts);
  const Eigen::VectorXd base = testing::scenario_theta().flatten();
  Eigen::VectorXd flat = base;
  for (Eigen::Index i = 0; i < flat.size(); ++i) flat(i) += std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  in.theta = ParamVector::unflatten(ModelSpec::main_effects(), flat);
  in.m = 2;
  in.n = 36;
  return in;
}

}  // namespace

TEST_CASE("binomial and stars-and-bars counts") {
  CHECK(binomial(5, 2) == 10);
  CHECK(binomial(0, 0) == 1);
  CHECK(binomial(3, 5) == 0);
  CHECK(binomial(200, 100) == UINT64_MAX);
  const std::vector<int> steps{180, 90, 45, 15, 5, 1};
  const std::vector<std::uint64_t> rows{10, 35, 165, 2925, 67525, 7906261};
  for (std::size_t i = 0; i < steps.size(); ++i) CHECK(first_grid_row_count(400, 4, 10, steps[i]) == rows[i]);
  CHECK_THROWS_AS(first_grid_row_count(400, 4, 10, 7), Error);
  CHECK_THROWS_AS(first_grid_row_count(30, 4, 10, 1), Error);
}

TEST_CASE("property: bounded counts equal brute-force enumeration") {
  std::mt19937_64 rng(41);
  for (int rep = 0; rep < 200; ++rep) {
    const int K = std::uniform_int_distribution<int>(1, 5)(rng);
    const int step = std::uniform_int_distribution<int>(1, 3)(rng);
    Eigen::VectorXi lo(K), hi(K);
    for (int k = 0; k < K; ++k) {
      lo(k) = std::uniform_int_distribution<int>(0, 5)(rng);
      hi(k) = lo(k) + std::uniform_int_distribution<int>(0, 12)(rng);
    }
    const int n = std::uniform_int_distribution<int>(lo.sum(), hi.sum())(rng);
    const auto brute = oracle::brute_force_grid(lo, hi, step, n);
    CHECK(bounded_composition_count({lo, hi}, step, n) == brute.size());
    const auto grid = rows_of(enumerate_grid({lo, hi}, step, n));
    CHECK(grid == brute);  // both lexicographic
  }
}

__extension__ typedef unsigned __int128 u128;

TEST_CASE("large bounded counts stay exact past 64-bit intermediates") {
  Bounds b{Eigen::VectorXi::Zero(25), Eigen::VectorXi::Constant(25, 30)};
  // Coefficient of x^300 in ((1 - x^31) / (1 - x))^25, computed by a direct DP here.
  std::vector<u128> ways(301, 0);
  ways[0] = 1;
  for (int k = 0; k < 25; ++k) {
    std::vector<u128> next(301, 0);
    for (int t = 0; t <= 300; ++t)
      for (int a = 0; a <= 30 && a <= t; ++a) next[t] += ways[t - a];
    ways = next;
  }
  const u128 expected = ways[300];
  const std::uint64_t got = bounded_composition_count(b, 1, 300);
  if (expected > UINT64_MAX) {
    CHECK(got == UINT64_MAX);
  } else {
    CHECK(got == static_cast<std::uint64_t>(expected));
  }
}

TEST_CASE("neighborhood counts around the worked-example best design") {
  const StratumTable strata = testing::example_strata();
  const Eigen::VectorXi prev = (Eigen::VectorXi(4) << 10, 115, 85, 190).finished();
  CHECK(neighborhood_row_count(prev, 15, 5, 10, strata, 400) == 134);
  CHECK(neighborhood_row_count(prev, 15, 1, 10, strata, 400) == 10296);
  const Bounds nb = neighborhood_bounds(prev, 15, allocation_floor(strata, 10), strata.counts());
  CHECK(nb.lower == (Eigen::VectorXi(4) << 10, 100, 70, 175).finished());
  CHECK(nb.upper == (Eigen::VectorXi(4) << 25, 130, 100, 205).finished());
  CHECK(enumerate_grid(nb, 5, 400).rows() == 134);
  CHECK(enumerate_grid(nb, 1, 400).rows() == 10296);
}

TEST_CASE("candidate steps follow the smallest-prime-factor chain") {
  CHECK(candidate_steps(360) == std::vector<int>{180, 90, 45, 15, 5, 1});
  CHECK(candidate_steps(7) == std::vector<int>{7, 1});
  CHECK(candidate_steps(1) == std::vector<int>{1});
  CHECK(candidate_steps(0) == std::vector<int>{1});
  CHECK(candidate_steps(12) == std::vector<int>{6, 3, 1});
}

TEST_CASE("step schedule for the worked example") {
  const StratumTable strata = testing::example_strata();
  const GridSchedule s = choose_step_schedule(400, 4, 10, 10000, strata);
  REQUIRE_FALSE(s.steps.empty());
  CHECK(s.steps.front() == 15);
  CHECK(s.refine_steps);
  const Eigen::VectorXi prev = (Eigen::VectorXi(4) << 10, 115, 85, 190).finished();
  CHECK(next_step(s.steps, prev, 15, allocation_floor(strata, 10), strata.counts(), 400, 10000) == 5);
  // A tiny budget still reaches step 1 through the coarsest remaining step.
  CHECK(next_step({5, 1}, prev, 15, allocation_floor(strata, 10), strata.counts(), 400, 10) == 5);
  CHECK_THROWS_AS(choose_step_schedule(400, 4, 10, 5, strata), Error);
}

TEST_CASE("schedule validation") {
  GridSchedule s;
  s.steps = {6, 4, 1};
  CHECK_THROWS_AS(s.validate(), Error);
  s.steps = {6, 3};
  CHECK_THROWS_AS(s.validate(), Error);
  s.steps = {6, 3, 1};
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("worked example search: three iterations with rows 2925, 134") {
  const StratumTable strata = testing::example_strata();
  GridSchedule schedule;
  const SearchTrace t =
      adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 400, schedule);
  REQUIRE(t.iterations.size() == 3);
  CHECK(t.iterations[0].rows == 2925);
  CHECK(t.iterations[0].step == 15);
  CHECK(t.iterations[1].rows == 134);
  CHECK(t.iterations[1].step == 5);
  CHECK(t.iterations[2].step == 1);
  CHECK(t.design.n() == 400);
  for (std::size_t i = 1; i < t.iterations.size(); ++i) {
    CHECK(t.iterations[i].best_variance <= t.iterations[i - 1].best_variance);
  }
  const auto& top = t.iterations[0].top;
  CHECK(top.size() == 10);
  for (std::size_t i = 1; i < top.size(); ++i) CHECK(top[i - 1].variance <= top[i].variance);
  const auto& s = t.iterations[0].summary;
  CHECK(s.min <= s.q1);
  CHECK(s.q1 <= s.median);
  CHECK(s.median <= s.q3);
  CHECK(s.q3 <= s.max);
  CHECK(s.min == t.iterations[0].best_variance);
}

TEST_CASE("search is independent of the thread count") {
  const StratumTable strata = testing::example_strata();
  GridSchedule schedule;
  SearchOptions one, many;
  one.threads = 1;
  many.threads = 4;
  const auto a = adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 400, schedule,
                                      Weighting::Observed, one);
  const auto b = adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 400, schedule,
                                      Weighting::Observed, many);
  CHECK(a.design.allocation == b.design.allocation);
  CHECK(a.variance == b.variance);
}

TEST_CASE("property: step-1 search returns the exhaustive minimizer") {
  std::mt19937_64 rng(42);
  for (int rep = 0; rep < 10; ++rep) {
    const Instance in = random_instance(rng);
    const ModelSpec spec = ModelSpec::main_effects();
    const InformationModel model(spec, in.theta, in.strata);
    const Eigen::VectorXi floor = Eigen::VectorXi::Constant(4, in.m).cwiseMin(in.strata.counts());
    const auto all = oracle::all_designs(floor, in.strata.counts(), in.n);
    REQUIRE(all.size() <= 5000);
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXi arg;
    for (const auto& d : all) {
      double v;
      try {
        v = model.var_beta(d.cast<double>());
      } catch (const Error&) {
        continue;
      }
      if (v < best || (v == best && lex_less(d, arg))) {
        best = v;
        arg = d;
      }
    }
    GridSchedule schedule;
    schedule.m = in.m;
    schedule.steps = {1};
    const SearchTrace t = adaptive_grid_search(model, in.n, schedule);
    CHECK(t.design.allocation == arg);
    CHECK(t.variance == best);
  }
}

TEST_CASE("lower bounds are respected") {
  const StratumTable strata = testing::example_strata();
  SearchOptions opt;
  opt.lower_bounds = (Eigen::VectorXi(4) << 100, 0, 50, 0).finished();
  const SearchTrace t = adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 400,
                                             GridSchedule{}, Weighting::Observed, opt);
  CHECK(t.design.allocation(0) >= 100);
  CHECK(t.design.allocation(2) >= 50);
  CHECK(t.design.n() == 400);
}

TEST_CASE("early stop ends the search once the improvement is small") {
  GridSchedule s;
  s.early_stop_rel_change = 1.0;
  const SearchTrace t = adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(),
                                             testing::example_strata(), 400, s);
  CHECK(t.early_stopped);
  CHECK(t.iterations.size() == 2);
}

TEST_CASE("infeasible budgets") {
  const StratumTable strata = StratumTable::from_counts((Eigen::VectorXi(4) << 5, 5, 5, 5).finished());
  CHECK_THROWS_AS(adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 30,
                                       GridSchedule{}),
                  Error);
  GridSchedule bad;
  bad.steps = {7, 1};
  CHECK_THROWS_AS(adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), testing::example_strata(),
                                       400, bad),
                  Error);
}

TEST_CASE("type-7 quantiles") {
  const std::vector<double> v{1, 2, 3, 4};
  CHECK(quantile_sorted(v, 0.0) == 1);
  CHECK(quantile_sorted(v, 1.0) == 4);
  CHECK(quantile_sorted(v, 0.5) == doctest::Approx(2.5));
  CHECK(quantile_sorted(v, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("progress is reported per block and a throwing callback aborts the search") {
  const StratumTable strata = testing::example_strata();
  std::vector<SearchProgress> seen;
  SearchOptions opt;
  opt.progress = [&](const SearchProgress& p) { seen.push_back(p); };
  GridSchedule one;
  one.steps = {5, 1};
  const SearchTrace t =
      adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 400, one, Weighting::Observed, opt);
  REQUIRE(seen.size() >= 4);
  CHECK(seen.front().rows_evaluated == 0);
  CHECK(seen.front().rows_total == t.iterations[0].rows);
  CHECK(seen.front().step == 5);
  for (std::size_t i = 1; i < seen.size(); ++i) {
    if (seen[i].iteration == seen[i - 1].iteration) CHECK(seen[i].rows_evaluated > seen[i - 1].rows_evaluated);
  }
  // 67525 rows at step 5 span two blocks.
  CHECK(std::count_if(seen.begin(), seen.end(), [](const SearchProgress& p) { return p.iteration == 0; }) == 3);
  CHECK(seen.back().rows_evaluated == t.iterations.back().rows);

  int calls = 0;
  opt.progress = [&](const SearchProgress&) {
    if (++calls == 2) throw Error(ErrorKind::Cancelled, "stop");
  };
  try {
    adaptive_grid_search(testing::scenario_theta(), ModelSpec::main_effects(), strata, 400, one, Weighting::Observed, opt);
    FAIL("expected Cancelled");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::Cancelled);
  }
  CHECK(calls == 2);
}
