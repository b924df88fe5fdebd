#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <fstream>
#include <numeric>
#include <thread>

#include "twophase/requests.hpp"
#include "twophase/service.hpp"
#include "twophase/session.hpp"
#include "twophase/simulation.hpp"

// After the Eigen-including headers: resolv.h defines a `_res` macro.
#include <httplib.h>

using namespace twophase;

namespace {

json load(const std::string& name) {
  std::ifstream in(std::string(TWOPHASE_DATA_DIR) + "/" + name);
  return json::parse(in);
}

struct Running {
  Service service;
  int port;
  httplib::Client client;
  explicit Running(ServiceConfig cfg = {})
      : service(std::move(cfg)), port(service.start()), client("127.0.0.1", port) {
    client.set_read_timeout(600, 0);
  }
};

json body(const httplib::Result& r) {
  REQUIRE(r);
  return json::parse(r->body);
}

json post(httplib::Client& c, const std::string& path, const json& doc, int expect) {
  auto r = c.Post(path, doc.dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == expect);
  return json::parse(r->body);
}

json wait_job(httplib::Client& c, const std::string& id) {
  for (int i = 0; i < 6000; ++i) {
    const json j = body(c.Get("/v1/jobs/" + id));
    const std::string st = j.at("status");
    if (st != "queued" && st != "running") return j;
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
  FAIL("job did not finish");
  return {};
}

json fit_records(std::uint64_t seed, std::size_t validated) {
  const Cohort c = generate_cohort(SimScenario{}, seed);
  std::vector<std::size_t> idx(validated);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const Dataset d = mask_unvalidated(c.truth, idx);
  json recs = json::array();
  for (const auto& r : d.records) recs.push_back(to_json(r));
  return recs;
}

}  // namespace

TEST_CASE("health and CORS") {
  Running s;
  auto r = s.client.Get("/v1/health");
  REQUIRE(r);
  CHECK(r->status == 200);
  CHECK(r->get_header_value("Access-Control-Allow-Origin") == "*");
  auto o = s.client.Options("/v1/design");
  REQUIRE(o);
  CHECK(o->status == 204);
}

TEST_CASE("design job completes with the worked-example search and byte-identical result") {
  Running s;
  json req = {{"strata", load("example_strata.json")}, {"params", load("synthetic_params.json")}, {"n", 400},
              {"m", 10}, {"strategy", "optmle"}};
  auto r = s.client.Post("/v1/design", req.dump(), "application/json");
  REQUIRE(r);
  CHECK(r->status == 202);
  const json accepted = json::parse(r->body);
  CHECK(r->get_header_value("Location") == "/v1/jobs/" + accepted.at("id").get<std::string>());
  const json done = wait_job(s.client, accepted.at("id"));
  REQUIRE(done.at("status") == "succeeded");
  const json& trace = done.at("result").at("trace");
  std::vector<long long> rows;
  for (const auto& it : trace.at("iterations")) rows.push_back(it.at("rows"));
  CHECK(rows == std::vector<long long>{2925, 134, 491});
  // Progress describes the current (here final) iteration.
  CHECK(done.at("progress").at("iteration") == 2);
  CHECK(done.at("progress").at("rows_evaluated") == 491);
  CHECK(done.at("progress").at("rows_total") == 491);

  auto raw = s.client.Get("/v1/jobs/" + accepted.at("id").get<std::string>() + "/result");
  REQUIRE(raw);
  CHECK(raw->status == 200);
  CHECK(raw->body == serialize_document(run_design(req)));
}

TEST_CASE("design validation errors are synchronous 400s") {
  Running s;
  const json strata = load("example_strata.json");
  json e = post(s.client, "/v1/design", {{"strata", strata}, {"n", 400}, {"strategy", "optmle"}}, 400);
  CHECK(e.at("error").at("kind") == "InvalidArgument");
  CHECK(e.at("error").at("numeric") == false);
  e = post(s.client, "/v1/design", {{"strata", strata}, {"n", 1000000}, {"strategy", "bccstar"}}, 400);
  auto r = s.client.Post("/v1/design", "{not json", "application/json");
  REQUIRE(r);
  CHECK(r->status == 400);
  CHECK(json::parse(r->body).at("error").at("kind") == "ParseError");
}

TEST_CASE("numeric failures inside a design job surface as 422 on the result") {
  Running s;
  // Y* = 1 is impossible under these coefficients yet the strata contain it.
  json params = load("synthetic_params.json");
  params["theta"]["eta_ystar"][0] = -1000.0;
  json req = {{"strata", load("example_strata.json")}, {"params", params}, {"n", 400}, {"m", 10}, {"strategy", "optmle"}};
  auto r = s.client.Post("/v1/design", req.dump(), "application/json");
  REQUIRE(r);
  REQUIRE(r->status == 202);
  const std::string id = json::parse(r->body).at("id");
  const json done = wait_job(s.client, id);
  CHECK(done.at("status") == "failed");
  CHECK(done.at("error").at("kind") == "DegenerateStratum");
  auto res = s.client.Get("/v1/jobs/" + id + "/result");
  REQUIRE(res);
  CHECK(res->status == 422);
  CHECK(json::parse(res->body).at("error").at("numeric") == true);
}

TEST_CASE("fit endpoint: success, separation 422, malformed 400") {
  Running s;
  const json fit = post(s.client, "/v1/fit", {{"records", fit_records(31, 400)}, {"allow_boundary_nuisance", true}}, 200);
  CHECK(fit.at("converged") == true);
  CHECK(fit.at("n_validated") == 400);
  CHECK(fit == json::parse(serialize_document(run_fit({{"records", fit_records(31, 400)}, {"allow_boundary_nuisance", true}}))));

  json sep = fit_records(32, 2000);
  for (auto& r : sep) r["x"] = r["xstar"];
  const json e = post(s.client, "/v1/fit", {{"records", sep}}, 422);
  CHECK(e.at("error").at("numeric") == true);
  post(s.client, "/v1/fit", {{"rows", json::array()}}, 400);
}

TEST_CASE("unknown ids are 404 and oversized bodies are 413") {
  ServiceConfig cfg;
  cfg.max_body_bytes = 1024;
  Running s(cfg);
  auto r = s.client.Get("/v1/jobs/nope");
  REQUIRE(r);
  CHECK(r->status == 404);
  CHECK(json::parse(r->body).at("error").at("kind") == "NotFound");
  r = s.client.Get("/v1/sessions/nope");
  REQUIRE(r);
  CHECK(r->status == 404);
  r = s.client.Get("/v1/nothing-here");
  REQUIRE(r);
  CHECK(r->status == 404);
  r = s.client.Post("/v1/fit", std::string(4096, ' '), "application/json");
  REQUIRE(r);
  CHECK(r->status == 413);
  CHECK(json::parse(r->body).at("error").at("kind") == "PayloadTooLarge");
}

TEST_CASE("session lifecycle over HTTP with capacity and transition conflicts") {
  Running s;
  const Cohort c = generate_cohort(SimScenario{}, 41);
  const json cfg = {{"strata", to_json(c.strata)}, {"n", 200}, {"waves", 2}, {"allow_boundary_nuisance", true}};
  const json created = post(s.client, "/v1/sessions", cfg, 201);
  const std::string id = created.at("id");
  CHECK(created.at("state") == "created");
  const std::string base = "/v1/sessions/" + id;

  json e = post(s.client, base + "/refit", json::object(), 409);
  CHECK(e.at("error").at("kind") == "IllegalTransition");

  const json planned = post(s.client, base + "/plan-wave", json::object(), 200);
  CHECK(planned.at("session").at("state") == "wave-planned");
  const json inc = planned.at("result").at("increment");

  const auto index = index_strata(c.truth.records, c.strata);
  json over = json::array();
  for (int i = 0; i <= inc[0].get<int>(); ++i) over.push_back(to_json(c.truth.records[index[0][static_cast<std::size_t>(i)]]));
  e = post(s.client, base + "/ingest", {{"records", over}}, 409);
  CHECK(e.at("error").at("kind") == "CapacityExceeded");

  json recs = json::array();
  for (std::size_t k = 0; k < index.size(); ++k) {
    for (int i = 0; i < inc[k].get<int>(); ++i) recs.push_back(to_json(c.truth.records[index[k][static_cast<std::size_t>(i)]]));
  }
  e = post(s.client, base + "/ingest", {{"records", recs}, {"expected_version", 0}}, 409);
  CHECK(e.at("error").at("kind") == "VersionConflict");
  post(s.client, base + "/ingest", {{"records", recs}, {"expected_version", 1}}, 200);
  const json refit = post(s.client, base + "/refit", json::object(), 200);
  CHECK(refit.at("result").at("fallback") == false);

  const json got = body(s.client.Get(base));
  CHECK(got.at("version") == 3);
  const json log = body(s.client.Get(base + "/log"));
  CHECK(log.size() == 4);
  CHECK(Session::replay(id, log).to_json() == got);
}

TEST_CASE("simulation job runs and can be cancelled") {
  Running s;
  json sc = load("desk_scenario.json");
  sc["replicates"] = 2;
  sc["N"] = 600;
  sc["n"] = 60;
  auto r = s.client.Post("/v1/simulate", sc.dump(), "application/json");
  REQUIRE(r);
  REQUIRE(r->status == 202);
  const json done = wait_job(s.client, json::parse(r->body).at("id"));
  CHECK(done.at("status") == "succeeded");
  CHECK(done.at("result").at("metrics").is_array());

  json big = {{"strata", load("example_strata.json")}, {"params", load("synthetic_params.json")}, {"n", 400},
              {"m", 1}, {"strategy", "optmle"}, {"steps", {1}}, {"max_rows", 1000000000}};
  r = s.client.Post("/v1/design", big.dump(), "application/json");
  REQUIRE(r);
  REQUIRE(r->status == 202);
  const std::string id = json::parse(r->body).at("id");
  auto d = s.client.Delete("/v1/jobs/" + id);
  REQUIRE(d);
  CHECK(d->status == 202);
  const json cancelled = wait_job(s.client, id);
  CHECK(cancelled.at("status") == "cancelled");
  auto res = s.client.Get("/v1/jobs/" + id + "/result");
  REQUIRE(res);
  CHECK(res->status == 409);
}
