#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "twophase/session_store.hpp"
#include "twophase/simulation.hpp"

using namespace twophase;

namespace {

// Supplies validated records for planned increments from a simulated cohort.
struct Auditor {
  Cohort cohort;
  std::vector<std::vector<std::size_t>> index;
  std::vector<std::size_t> used;

  explicit Auditor(std::uint64_t seed) : cohort(generate_cohort(SimScenario{}, seed)) {
    index = index_strata(cohort.truth.records, cohort.strata);
    used.assign(index.size(), 0);
  }

  json config(int n, int waves) const {
    return {{"strata", to_json(cohort.strata)}, {"n", n}, {"waves", waves}, {"allow_boundary_nuisance", true}};
  }

  json records_for(const json& increment) {
    json out = json::array();
    for (std::size_t k = 0; k < index.size(); ++k) {
      for (int i = 0; i < increment[k].get<int>(); ++i) out.push_back(to_json(cohort.truth.records[index[k][used[k]++]]));
    }
    return out;
  }
};

json act(const std::string& name) { return {{"action", name}}; }


}  // namespace

TEST_CASE("two-wave session runs plan, ingest, refit and finalize") {
  Auditor a(201);
  Session s = Session::create("s1", a.config(200, 2));
  CHECK(s.state() == SessionState::Created);
  const json p1 = s.apply(act("plan"));
  CHECK(p1.at("strategy") == "bccstar");
  CHECK(s.state() == SessionState::WavePlanned);
  s.apply({{"action", "ingest"}, {"records", a.records_for(p1.at("increment"))}});
  CHECK(s.state() == SessionState::WaveDataIngested);
  const json f1 = s.apply(act("refit"));
  CHECK(f1.at("fallback") == false);
  const json p2 = s.apply(act("plan"));
  CHECK(p2.at("strategy") == "optmle");
  for (int k = 0; k < s.config().strata.size(); ++k) {
    CHECK(p2.at("cumulative")[static_cast<std::size_t>(k)].get<int>() >= s.validated_counts()(k));
  }
  s.apply({{"action", "ingest"}, {"records", a.records_for(p2.at("increment"))}});
  s.apply(act("refit"));
  const json fin = s.apply(act("finalize"));
  CHECK(s.state() == SessionState::Finalized);
  CHECK(fin.at("validated_counts").get<std::vector<int>>() ==
        std::vector<int>(s.validated_counts().data(), s.validated_counts().data() + s.validated_counts().size()));
  CHECK(s.validated_counts().sum() == 200);
  CHECK(fin.at("fit").at("converged") == true);
  CHECK(s.version() == 7);
  CHECK(s.log().size() == 8);
}

TEST_CASE("illegal transitions are rejected without changing state") {
  Auditor a(202);
  Session s = Session::create("s2", a.config(200, 2));
  for (const char* bad : {"ingest", "refit", "finalize"}) {
    try {
      s.apply({{"action", bad}, {"records", json::array()}});
      FAIL("expected IllegalTransition");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::IllegalTransition);
    }
  }
  CHECK(s.version() == 0);
  s.apply(act("plan"));
  CHECK_THROWS_AS(s.apply(act("plan")), Error);
  CHECK_THROWS_AS(s.apply(act("refit")), Error);
  CHECK_THROWS_AS(s.apply(act("explode")), Error);
}

TEST_CASE("ingest beyond the planned allocation is a capacity error and is atomic") {
  Auditor a(203);
  Session s = Session::create("s3", a.config(200, 2));
  const json plan = s.apply(act("plan"));
  json inc = plan.at("increment");
  inc[0] = inc[0].get<int>() + 1;
  try {
    s.apply({{"action", "ingest"}, {"records", a.records_for(inc)}});
    FAIL("expected CapacityExceeded");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::CapacityExceeded);
  }
  CHECK(s.validated_counts().sum() == 0);
  CHECK(s.state() == SessionState::WavePlanned);
}

TEST_CASE("partial ingests accumulate and the cells form expands counts") {
  Auditor a(204);
  Session s = Session::create("s4", a.config(200, 2));
  s.apply(act("plan"));
  s.apply({{"action", "ingest"}, {"cells", {{{"ystar", 0}, {"xstar", 0}, {"y", 0}, {"x", 0}, {"count", 3}}}}});
  s.apply({{"action", "ingest"}, {"cells", {{{"ystar", 0}, {"xstar", 0}, {"y", 1}, {"x", 0}, {"count", 2}}}}});
  CHECK(s.validated_counts()(0) == 5);
  CHECK(s.state() == SessionState::WaveDataIngested);
  CHECK_THROWS_AS(s.apply({{"action", "ingest"}, {"cells", {{{"ystar", 0}, {"xstar", 0}, {"y", 5}, {"x", 0}, {"count", 1}}}}}),
                  Error);
  CHECK_THROWS_AS(s.apply({{"action", "ingest"}, {"records", {{{"ystar", 0}, {"xstar", 0}, {"z", 3}, {"y", 1}, {"x", 0}}}}}),
                  Error);
}

TEST_CASE("replaying the audit log reconstructs identical state") {
  Auditor a(205);
  Session s = Session::create("s5", a.config(200, 3));
  const json p = s.apply(act("plan"));
  s.apply({{"action", "ingest"}, {"records", a.records_for(p.at("increment"))}});
  s.apply(act("refit"));
  s.apply(act("plan"));
  const Session r = Session::replay("s5", s.log());
  CHECK(r.to_json() == s.to_json());
  CHECK(Session::from_json(s.to_json()).to_json() == s.to_json());
}

TEST_CASE("a failed refit flags the next wave as a fallback") {
  Auditor a(206);
  json cfg = a.config(200, 2);
  cfg["allow_boundary_nuisance"] = false;
  Session s = Session::create("s6", cfg);
  const json p = s.apply(act("plan"));
  // Every validated record agrees with its surrogates: the strict fit separates.
  json recs = a.records_for(p.at("increment"));
  for (auto& r : recs) {
    r["y"] = r["ystar"];
    r["x"] = r["xstar"];
  }
  s.apply({{"action", "ingest"}, {"records", recs}});
  const json f = s.apply(act("refit"));
  CHECK(f.at("fallback") == true);
  CHECK(s.state() == SessionState::Refitted);
  const json p2 = s.apply(act("plan"));
  CHECK(p2.at("strategy") == "bccstar-fallback");
  CHECK(p2.at("fallback") == true);
  CHECK(s.to_json().at("fallback_used") == true);
}

TEST_CASE("optimistic version checks") {
  Auditor a(207);
  Session s = Session::create("s7", a.config(200, 2));
  CHECK_THROWS_AS(s.apply({{"action", "plan"}, {"expected_version", 3}}), Error);
  s.apply({{"action", "plan"}, {"expected_version", 0}});
  CHECK(s.version() == 1);
  CHECK_FALSE(s.log().back().contains("expected_version"));
}

TEST_CASE("SQLite store: insert, load, versioned update") {
  Auditor a(208);
  SqliteSessionStore store(":memory:");
  Session s = Session::create(new_session_id(), a.config(200, 2));
  store.insert(s);
  CHECK_THROWS_AS(store.insert(s), Error);
  Session loaded = *store.load(s.id());
  CHECK(loaded.to_json() == s.to_json());
  CHECK_FALSE(store.load("missing").has_value());

  Session w1 = *store.load(s.id());
  Session w2 = *store.load(s.id());
  w1.apply(act("plan"));
  store.update(w1, 0);
  w2.apply(act("plan"));
  try {
    store.update(w2, 0);
    FAIL("expected VersionConflict");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::VersionConflict);
  }
  CHECK(store.load(s.id())->to_json() == w1.to_json());
}

TEST_CASE("directory store survives process restarts") {
  Auditor a(209);
  const auto dir = std::filesystem::temp_directory_path() / ("twophase-session-" + new_session_id());
  {
    DirectorySessionStore store(dir);
    Session s = Session::create("dir", a.config(200, 2));
    store.insert(s);
    s.apply(act("plan"));
    store.update(s, 0);
  }
  DirectorySessionStore again(dir);
  const Session s = again.load_only();
  CHECK(s.state() == SessionState::WavePlanned);
  CHECK(s.version() == 1);
  CHECK_THROWS_AS(again.insert(s), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("config validation") {
  Auditor a(210);
  json cfg = a.config(200, 2);
  cfg["n"] = 100000;
  CHECK_THROWS_AS(Session::create("x", cfg), Error);
  cfg = a.config(200, 5);
  CHECK_THROWS_AS(Session::create("x", cfg), Error);
  CHECK_THROWS_AS(Session::create("x", json{{"n", 10}}), Error);
}
