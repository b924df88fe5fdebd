#include "cli.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "twophase/requests.hpp"
#include "twophase/service.hpp"
#include "twophase/session_store.hpp"

namespace twophase::cli {
namespace {

namespace fs = std::filesystem;

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::InvalidArgument, "cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const std::string& path) {
  try {
    return parse_document(read_text(path));
  } catch (const Error& e) {
    throw Error(e.kind(), path + ": " + e.what());
  }
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::InvalidArgument, "cannot write " + path);
  f << text;
}

json records_from_csv_file(const std::string& path) {
  std::istringstream in(read_text(path));
  json records = json::array();
  for (const Record& r : read_records_csv(in)) records.push_back(to_json(r));
  return records;
}

struct DesignArgs {
  std::string request, strata, params, strategy, out, weighting;
  int n = 0;
  std::optional<int> m;
  std::optional<std::uint64_t> max_rows, seed;
  std::vector<int> steps;
  std::optional<double> early_stop;
  unsigned threads = 0;
};

struct FitArgs {
  std::string data, spec, out;
  bool boundary = false;
};

struct SimArgs {
  std::string scenario, out;
  std::optional<int> replicates;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
};

struct WaveArgs {
  std::string dir, config, records, cells, log;
  std::optional<long long> expected_version;
};

struct ServeArgs {
  std::string host = "127.0.0.1", db = "twophase.db";
  int port = 8080;
  unsigned workers = 2, threads = 0;
  std::size_t max_body = 8u << 20;
};

json design_request(const DesignArgs& a) {
  json request = a.request.empty() ? json::object() : read_json(a.request);
  if (!a.strata.empty()) request["strata"] = read_json(a.strata);
  if (!a.params.empty()) request["params"] = read_json(a.params);
  if (a.n > 0) request["n"] = a.n;
  if (!a.strategy.empty()) request["strategy"] = a.strategy;
  if (a.m) request["m"] = *a.m;
  if (a.max_rows) request["max_rows"] = *a.max_rows;
  if (a.seed) request["seed"] = *a.seed;
  if (!a.steps.empty()) request["steps"] = a.steps;
  if (a.early_stop) request["early_stop_rel_change"] = *a.early_stop;
  if (!a.weighting.empty()) request["weighting"] = a.weighting;
  return request;
}

int serve(const ServeArgs& a, std::ostream& out) {
  ServiceConfig config;
  config.db_path = a.db;
  config.workers = a.workers;
  config.compute_threads = a.threads;
  config.max_body_bytes = a.max_body;
  Service service(config);
  const int port = service.start(a.host, a.port);
  out << "listening on http://" << a.host << ":" << port << std::endl;
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  int sig = 0;
  sigwait(&set, &sig);
  service.stop();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Two-phase validation study design under outcome and exposure misclassification", "twophase"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "twophase 1.0.0");

  DesignArgs d;
  auto* design = app.add_subcommand("design", "Compute a Phase II design (writes Design + SearchTrace JSON)");
  design->add_option("--request", d.request, "Full request JSON; other flags override its fields");
  design->add_option("--strata", d.strata, "Phase I strata JSON");
  design->add_option("--params", d.params, "Parameters JSON {model?, theta}");
  design->add_option("--n", d.n, "Phase II size");
  design->add_option("--m", d.m, "Minimum per-stratum allocation");
  design->add_option("--max-rows", d.max_rows, "Row budget per grid");
  design->add_option("--strategy", d.strategy, "srs | ccstar | bccstar | optmle");
  design->add_option("--seed", d.seed, "Seed for random strategies");
  design->add_option("--steps", d.steps, "Explicit step schedule ending in 1");
  design->add_option("--early-stop", d.early_stop, "Stop when the relative variance change falls below this");
  design->add_option("--weighting", d.weighting, "observed | expected");
  design->add_option("--threads", d.threads, "Worker threads (0: all cores)");
  design->add_option("--out", d.out, "Output file (default stdout)");

  FitArgs f;
  auto* fit = app.add_subcommand("fit", "Maximum likelihood fit of a two-phase dataset");
  fit->add_option("--data", f.data, "Records CSV (v,ystar,xstar,y,x[,z])")->required();
  fit->add_option("--spec", f.spec, "Model JSON (z_levels, terms); main effects when omitted");
  fit->add_flag("--allow-boundary-nuisance", f.boundary, "Hold separated nuisance coefficients at the bound");
  fit->add_option("--out", f.out, "Output file (default stdout)");

  SimArgs s;
  auto* simulate = app.add_subcommand("simulate", "Monte Carlo comparison of designs");
  simulate->add_option("--scenario", s.scenario, "Scenario JSON")->required();
  simulate->add_option("--out", s.out, "Output directory (metrics.csv, replicates.csv, summary.json)")->required();
  simulate->add_option("--replicates", s.replicates, "Override the scenario's replicate count");
  simulate->add_option("--seed", s.seed, "Override the scenario's seed");
  simulate->add_option("--threads", s.threads, "Worker threads (0: all cores)");

  WaveArgs w;
  auto* wave = app.add_subcommand("wave", "Resumable multi-wave audit session stored in a directory");
  wave->add_option("--session", w.dir, "Session directory")->required();
  wave->add_option("--expected-version", w.expected_version, "Fail unless the session is at this version");
  wave->require_subcommand(1);
  auto* init = wave->add_subcommand("init", "Create the session");
  init->add_option("--config", w.config, "Session config JSON")->required();
  wave->add_subcommand("plan", "Plan the next wave");
  auto* ingest = wave->add_subcommand("ingest", "Record validated results for the current wave");
  ingest->add_option("--records", w.records, "Validated records CSV");
  ingest->add_option("--cells", w.cells, "JSON array of {ystar, xstar, z, y, x, count}");
  wave->add_subcommand("refit", "Refit the model on everything validated so far");
  wave->add_subcommand("finalize", "Close the session after the last refit");
  wave->add_subcommand("status", "Print the session document");
  auto* replay = wave->add_subcommand("replay", "Rebuild the session from its audit log and compare");
  replay->add_option("--log", w.log, "Audit log JSON (default: the session's own)");

  ServeArgs v;
  auto* srv = app.add_subcommand("serve", "Run the HTTP/JSON service");
  srv->add_option("--host", v.host, "Bind address");
  srv->add_option("--port", v.port, "Port");
  srv->add_option("--db", v.db, "SQLite session store");
  srv->add_option("--workers", v.workers, "Concurrent compute jobs");
  srv->add_option("--threads", v.threads, "Threads per search");
  srv->add_option("--max-body", v.max_body, "Request size limit in bytes");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << serialize_document(error_json(ErrorKind::InvalidArgument, e.what()));
    return 2;
  }

  try {
    if (design->parsed()) {
      write_text(d.out, serialize_document(run_design(design_request(d), ComputeControl{{}, nullptr, d.threads})), out);
    } else if (fit->parsed()) {
      json request = json::object();
      if (!f.spec.empty()) {
        json spec = read_json(f.spec);
        if (spec.is_object() && spec.contains("model")) {
          request = spec;
        } else {
          request["model"] = spec;
        }
      }
      request["csv"] = read_text(f.data);
      if (f.boundary) request["allow_boundary_nuisance"] = true;
      write_text(f.out, serialize_document(run_fit(request)), out);
    } else if (simulate->parsed()) {
      json scenario = read_json(s.scenario);
      if (s.replicates) scenario["replicates"] = *s.replicates;
      if (s.seed) scenario["seed"] = *s.seed;
      const json result = run_simulate(scenario, s.threads);
      fs::create_directories(s.out);
      write_text((fs::path(s.out) / "metrics.csv").string(), result.at("metrics_csv").get<std::string>(), out);
      write_text((fs::path(s.out) / "replicates.csv").string(), result.at("replicates_csv").get<std::string>(), out);
      const json summary = {{"scenario", result.at("scenario")}, {"metrics", result.at("metrics")}};
      write_text((fs::path(s.out) / "summary.json").string(), serialize_document(summary), out);
      out << serialize_document(summary);
    } else if (wave->parsed()) {
      DirectorySessionStore store(w.dir);
      if (init->parsed()) {
        Session session = Session::create(new_session_id(), read_json(w.config));
        store.insert(session);
        out << serialize_document(session.to_json());
        return 0;
      }
      Session session = store.load_only();
      if (wave->got_subcommand("status")) {
        out << serialize_document(session.to_json());
        return 0;
      }
      if (replay->parsed()) {
        const json log = w.log.empty() ? session.log() : read_json(w.log);
        const Session rebuilt = Session::replay(session.id(), log);
        const bool identical = rebuilt.to_json() == session.to_json();
        out << serialize_document({{"identical", identical}, {"version", rebuilt.version()},
                                   {"state", to_string(rebuilt.state())}});
        return identical ? 0 : 2;
      }
      json action = json::object();
      if (w.expected_version) action["expected_version"] = *w.expected_version;
      if (wave->got_subcommand("plan")) {
        action["action"] = "plan";
      } else if (ingest->parsed()) {
        action["action"] = "ingest";
        if (!w.records.empty()) action["records"] = records_from_csv_file(w.records);
        if (!w.cells.empty()) action["cells"] = read_json(w.cells);
      } else if (wave->got_subcommand("refit")) {
        action["action"] = "refit";
      } else {
        action["action"] = "finalize";
      }
      const long long loaded = session.version();
      const json result = session.apply(action);
      store.update(session, loaded);
      out << serialize_document({{"result", result}, {"version", session.version()},
                                 {"state", to_string(session.state())}});
    } else if (srv->parsed()) {
      return serve(v, out);
    }
  } catch (const Error& e) {
    err << serialize_document(error_json(e.kind(), e.what()));
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    err << serialize_document(error_json(ErrorKind::InvalidArgument, e.what()));
    return 2;
  } catch (const std::exception& e) {
    err << serialize_document({{"error", {{"kind", "Internal"}, {"message", e.what()}, {"numeric", false}}}});
    return 1;
  }
  return 0;
}

}  // namespace twophase::cli
