#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "support.hpp"
#include "twophase/designs.hpp"
#include "twophase/simulation.hpp"

using namespace twophase;

namespace {

const StratumTable& vccc() {
  static const StratumTable t =
      StratumTable::from_counts((Eigen::VectorXi(8) << 171, 701, 34, 93, 333, 649, 8, 23).finished(), 2);
  return t;
}

struct Setup {
  SimScenario scenario;
  Cohort cohort;
  Dataset phase_one;
  RevealFn reveal;
};

Setup desk_setup(std::uint64_t seed) {
  Setup s;
  s.cohort = generate_cohort(s.scenario, seed);
  s.phase_one = mask_unvalidated(s.cohort.truth, {});
  const Dataset* truth = &s.cohort.truth;
  s.reveal = [truth](std::size_t r) {
    const Record& rec = truth->records[r];
    return std::pair<int, int>(*rec.y, *rec.x);
  };
  return s;
}

}  // namespace

TEST_CASE("BCC* waterfill on the VCCC strata") {
  const Design d = bcc_star_design(vccc(), 200);
  CHECK(d.allocation == (Eigen::VectorXi(8) << 28, 28, 28, 29, 28, 28, 8, 23).finished());
}

TEST_CASE("property: waterfill fills to n, respects capacity and stays balanced") {
  std::mt19937_64 rng(51);
  for (int rep = 0; rep < 300; ++rep) {
    const int K = std::uniform_int_distribution<int>(1, 8)(rng);
    Eigen::VectorXi cap(K);
    std::vector<StratumKey> keys;
    for (int k = 0; k < K; ++k) {
      cap(k) = std::uniform_int_distribution<int>(0, 50)(rng);
      keys.push_back({k % 2, (k / 2) % 2, k / 4});
    }
    if (cap.sum() == 0) continue;
    const int n = std::uniform_int_distribution<int>(0, cap.sum())(rng);
    const Eigen::VectorXi a = waterfill(cap, keys, n);
    CHECK(a.sum() == n);
    CHECK((a.array() >= 0).all());
    CHECK((a.array() <= cap.array()).all());
    // Any stratum below capacity has at least as many units as any other, minus one.
    for (int i = 0; i < K; ++i) {
      if (a(i) == cap(i)) continue;
      for (int j = 0; j < K; ++j) CHECK(a(j) <= a(i) + 1);
    }
  }
  CHECK_THROWS_AS(waterfill(Eigen::Vector2i(1, 1), {{0, 0, 0}, {0, 1, 0}}, 3), Error);
}

TEST_CASE("CC* splits evenly over the Y* groups") {
  const StratumTable strata = testing::example_strata();
  const Design d = cc_star_design(strata, 401, 7);
  CHECK(d.n() == 401);
  CHECK(d.allocation(0) + d.allocation(1) == 200);
  CHECK(d.allocation(2) + d.allocation(3) == 201);
  CHECK(cc_star_design(strata, 401, 7).allocation == d.allocation);
}

TEST_CASE("SRS is seeded and sums to n") {
  const StratumTable strata = testing::example_strata();
  const Design a = srs_design(strata, 400, 3), b = srs_design(strata, 400, 3), c = srs_design(strata, 400, 4);
  CHECK(a.n() == 400);
  CHECK(a.allocation == b.allocation);
  CHECK(a.allocation != c.allocation);
  CHECK_THROWS_AS(srs_design(strata, 20000, 1), Error);
}

TEST_CASE("record sampling draws within strata and avoids validated records") {
  std::vector<Record> recs;
  for (int i = 0; i < 40; ++i) recs.push_back({0, i % 2, (i / 2) % 2, {}, {}, 0});
  const StratumTable strata = tabulate_strata(recs);
  const auto index = index_strata(recs, strata);
  std::vector<bool> validated(recs.size(), false);
  validated[0] = validated[4] = true;
  const Design d{strata, (Eigen::VectorXi(4) << 8, 3, 0, 10).finished()};
  const auto draws = sample_records(d, index, validated, 9);
  CHECK(draws.size() == 21);
  CHECK(std::is_sorted(draws.begin(), draws.end()));
  Eigen::VectorXi per = Eigen::VectorXi::Zero(4);
  for (std::size_t r : draws) {
    CHECK_FALSE(validated[r]);
    ++per(*strata.find(recs[r].stratum()));
  }
  CHECK(per == d.allocation);
  const Design too_many{strata, (Eigen::VectorXi(4) << 9, 0, 0, 0).finished()};
  CHECK_THROWS_AS(sample_records(too_many, index, validated, 9), Error);
}

TEST_CASE("wave sizes") {
  CHECK(wave_sizes(200, 1) == std::vector<int>{200});
  CHECK(wave_sizes(201, 2) == std::vector<int>{100, 101});
  CHECK(wave_sizes(400, 3) == std::vector<int>{200, 100, 100});
  CHECK_THROWS_AS(wave_sizes(10, 4), Error);
}

TEST_CASE("plan_wave optimizes the total design above the current counts") {
  const StratumTable strata = testing::example_strata();
  const Eigen::VectorXi current = bcc_star_design(strata, 200).allocation;
  const WaveStep step = plan_wave(ModelSpec::main_effects(), strata, current, 200, testing::scenario_theta(),
                                  GridSchedule{});
  CHECK(step.strategy == "optmle");
  CHECK(step.cumulative.sum() == 400);
  CHECK((step.increment.array() >= 0).all());
  CHECK(step.cumulative == current + step.increment);
  const WaveStep blind = plan_wave(ModelSpec::main_effects(), strata, current, 200, std::nullopt, GridSchedule{});
  CHECK(blind.strategy == "bccstar");
  CHECK(blind.increment.sum() == 200);
}

TEST_CASE("one wave with the generating prior reduces to the optimal design") {
  Setup s = desk_setup(101);
  const ParamVector prior = scenario_parameters(s.scenario, fitting_spec(s.scenario));
  MultiwaveConfig cfg;
  cfg.n = 200;
  cfg.waves = 1;
  cfg.prior = prior;
  cfg.seed = 5;
  cfg.fit.allow_boundary_nuisance = true;
  const MultiwaveResult r = multiwave_optimal(s.phase_one, s.reveal, cfg);
  const SearchTrace direct = opt_mle_design(prior, fitting_spec(s.scenario), s.cohort.strata, 200, GridSchedule{});
  CHECK(r.plan.waves.size() == 1);
  CHECK(r.plan.cumulative == direct.design.allocation);
  CHECK(r.data.validated_count() == 200);
}

TEST_CASE("two-wave plan: BCC* first wave, lower-bounded second wave") {
  Setup s = desk_setup(102);
  MultiwaveConfig cfg;
  cfg.n = 200;
  cfg.waves = 2;
  cfg.seed = 6;
  cfg.fit.allow_boundary_nuisance = true;
  const MultiwaveResult r = multiwave_optimal(s.phase_one, s.reveal, cfg);
  REQUIRE(r.plan.waves.size() == 2);
  const auto& a = r.plan.waves[0];
  const auto& b = r.plan.waves[1];
  CHECK(a.strategy == "bccstar");
  CHECK(a.cumulative == bcc_star_design(s.cohort.strata, 100).allocation);
  CHECK(b.strategy == "optmle");
  CHECK((b.cumulative.array() >= a.cumulative.array()).all());
  CHECK(b.cumulative.sum() == 200);
  CHECK((b.cumulative.array() <= s.cohort.strata.counts().array()).all());
  REQUIRE(b.trace.has_value());
  CHECK(b.trace->iterations.front().bounds.lower.cwiseMax(a.cumulative) == b.trace->iterations.front().bounds.lower);
  CHECK(r.data.validated_count() == 200);
  CHECK_FALSE(r.plan.fallback_used());
  CHECK(a.theta_hat.has_value());
}

TEST_CASE("three-wave cumulative allocations are monotone") {
  Setup s = desk_setup(103);
  MultiwaveConfig cfg;
  cfg.n = 200;
  cfg.waves = 3;
  cfg.seed = 7;
  cfg.fit.allow_boundary_nuisance = true;
  const MultiwaveResult r = multiwave_optimal(s.phase_one, s.reveal, cfg);
  REQUIRE(r.plan.waves.size() == 3);
  CHECK(r.plan.sizes == std::vector<int>{100, 50, 50});
  for (std::size_t w = 1; w < 3; ++w) {
    CHECK((r.plan.waves[w].cumulative.array() >= r.plan.waves[w - 1].cumulative.array()).all());
    CHECK(r.plan.waves[w].increment.sum() == r.plan.sizes[w]);
  }
}

TEST_CASE("a failed interim fit falls back to waterfill and is flagged") {
  // Large enough that the second wave's real records break the separation.
  Setup s;
  s.scenario.N = 20000;
  s.scenario.n = 2000;
  s.cohort = generate_cohort(s.scenario, 104);
  s.phase_one = mask_unvalidated(s.cohort.truth, {});
  // The first wave reveals y = y*, x = x*: perfect agreement separates the
  // misclassification models under the strict fit.
  int calls = 0;
  const Dataset* truth = &s.cohort.truth;
  RevealFn reveal = [&calls, truth](std::size_t r) {
    const Record& rec = truth->records[r];
    return calls++ < 1000 ? std::pair<int, int>(rec.ystar, rec.xstar) : std::pair<int, int>(*rec.y, *rec.x);
  };
  MultiwaveConfig cfg;
  cfg.n = 2000;
  cfg.waves = 2;
  cfg.seed = 8;
  cfg.fit.allow_boundary_nuisance = false;
  const MultiwaveResult r = multiwave_optimal(s.phase_one, reveal, cfg);
  CHECK(r.plan.fallback_used());
  CHECK(r.plan.waves[1].strategy == "bccstar-fallback");
  CHECK(r.plan.waves[1].fallback_reason.find("WaveFitFailed") == 0);
  CHECK(r.plan.waves[1].cumulative.sum() == 2000);
}
