#pragma once

// HTTP/JSON front end. Routes:
//
//   POST /v1/design            -> 202 job          GET    /v1/jobs/{id}
//   POST /v1/simulate          -> 202 job          GET    /v1/jobs/{id}/result
//   POST /v1/fit               -> 200              DELETE /v1/jobs/{id}
//   POST /v1/sessions          -> 201              GET    /v1/sessions/{id}[/log]
//   POST /v1/sessions/{id}/{plan-wave,ingest,refit,finalize}
//   GET  /v1/health
//
// Errors carry {"error": {"kind", "message", "numeric"}} with 400 (validation),
// 404 (unknown id), 409 (state, capacity or version conflict), 413 (body too
// large), 422 (numeric failure) or 503 (job queue full).

#include <cstddef>
#include <memory>
#include <string>

namespace twophase {

struct ServiceConfig {
  std::string db_path = ":memory:";
  std::size_t max_body_bytes = 8u << 20;
  unsigned workers = 2;               // concurrent compute jobs
  std::size_t max_queued_jobs = 64;   // waiting jobs beyond the running ones
  std::size_t max_retained_jobs = 1024;
  unsigned compute_threads = 0;       // per-search threads, 0: hardware concurrency
};

class Service {
 public:
  explicit Service(ServiceConfig config = {});
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  // Binds (port 0 picks a free port) and serves on a background thread.
  // Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Serves on the calling thread until stop().
  void listen(const std::string& host, int port);
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace twophase
