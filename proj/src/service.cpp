#include "twophase/service.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <thread>
#include <vector>

#include "twophase/requests.hpp"
#include "twophase/session_store.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro that
// collides with Eigen parameter names.
#include <httplib.h>

namespace twophase {
namespace {

enum class JobStatus { Queued, Running, Succeeded, Failed, Cancelled };

const char* to_string(JobStatus s) {
  switch (s) {
    case JobStatus::Queued: return "queued";
    case JobStatus::Running: return "running";
    case JobStatus::Succeeded: return "succeeded";
    case JobStatus::Failed: return "failed";
    case JobStatus::Cancelled: return "cancelled";
  }
  return "unknown";
}

struct Job {
  std::string id;
  std::string kind;
  std::function<json(const ComputeControl&)> work;
  std::atomic<bool> cancel{false};

  mutable std::mutex mutex;
  JobStatus status = JobStatus::Queued;
  SearchProgress progress;
  std::string result;  // serialized document, byte-identical to the CLI output
  json error;
  int error_status = 0;

  json describe() const {
    std::lock_guard lock(mutex);
    json j = {{"id", id},
              {"kind", kind},
              {"status", to_string(status)},
              {"progress",
               {{"iteration", progress.iteration},
                {"step", progress.step},
                {"rows_evaluated", progress.rows_evaluated},
                {"rows_total", progress.rows_total}}},
              {"result_url", "/v1/jobs/" + id + "/result"}};
    if (status == JobStatus::Succeeded) j["result"] = json::parse(result);
    if (!error.is_null()) j["error"] = error["error"];
    return j;
  }
};

class JobQueue {
 public:
  JobQueue(unsigned workers, std::size_t max_queued, std::size_t max_retained, unsigned threads)
      : max_queued_(max_queued), max_retained_(max_retained), threads_(threads) {
    for (unsigned i = 0; i < std::max(1u, workers); ++i) workers_.emplace_back([this] { run(); });
  }
  ~JobQueue() {
    {
      std::lock_guard lock(mutex_);
      stopping_ = true;
      for (auto& j : pending_) j->cancel = true;
    }
    cv_.notify_all();
    for (auto& t : workers_) t.join();
  }

  // Returns nullptr when the queue is full.
  std::shared_ptr<Job> submit(std::string kind, std::function<json(const ComputeControl&)> work) {
    auto job = std::make_shared<Job>();
    job->kind = std::move(kind);
    job->work = std::move(work);
    {
      std::lock_guard lock(mutex_);
      if (pending_.size() >= max_queued_) return nullptr;
      job->id = "job-" + std::to_string(++counter_) + "-" + new_session_id().substr(0, 8);
      jobs_[job->id] = job;
      order_.push_back(job->id);
      evict_locked();
      pending_.push_back(job);
    }
    cv_.notify_one();
    return job;
  }

  std::shared_ptr<Job> find(const std::string& id) const {
    std::lock_guard lock(mutex_);
    auto it = jobs_.find(id);
    return it == jobs_.end() ? nullptr : it->second;
  }

 private:
  void evict_locked() {
    while (order_.size() > max_retained_) {
      auto it = jobs_.find(order_.front());
      if (it != jobs_.end()) {
        std::lock_guard jl(it->second->mutex);
        if (it->second->status == JobStatus::Queued || it->second->status == JobStatus::Running) break;
      }
      jobs_.erase(order_.front());
      order_.pop_front();
    }
  }

  void run() {
    for (;;) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return stopping_ || !pending_.empty(); });
        if (stopping_ && pending_.empty()) return;
        job = pending_.front();
        pending_.pop_front();
      }
      execute(*job);
    }
  }

  void execute(Job& job) {
    {
      std::lock_guard lock(job.mutex);
      if (job.cancel) {
        job.status = JobStatus::Cancelled;
        job.error = error_json(ErrorKind::Cancelled, "job cancelled before it started");
        job.error_status = 409;
        return;
      }
      job.status = JobStatus::Running;
    }
    ComputeControl control;
    control.cancel = &job.cancel;
    control.threads = threads_;
    control.progress = [&job](const SearchProgress& p) {
      std::lock_guard lock(job.mutex);
      job.progress = p;
    };
    try {
      std::string text = serialize_document(job.work(control));
      std::lock_guard lock(job.mutex);
      job.result = std::move(text);
      job.status = JobStatus::Succeeded;
    } catch (const Error& e) {
      std::lock_guard lock(job.mutex);
      job.status = e.kind() == ErrorKind::Cancelled ? JobStatus::Cancelled : JobStatus::Failed;
      job.error = error_json(e.kind(), e.what());
      job.error_status = http_status(e.kind());
    } catch (const std::exception& e) {
      std::lock_guard lock(job.mutex);
      job.status = JobStatus::Failed;
      job.error = {{"error", {{"kind", "Internal"}, {"message", e.what()}, {"numeric", false}}}};
      job.error_status = 500;
    }
  }

  std::size_t max_queued_;
  std::size_t max_retained_;
  unsigned threads_;
  mutable std::mutex mutex_;
  std::condition_variable cv_;
  std::deque<std::shared_ptr<Job>> pending_;
  std::map<std::string, std::shared_ptr<Job>> jobs_;
  std::deque<std::string> order_;
  std::uint64_t counter_ = 0;
  bool stopping_ = false;
  std::vector<std::thread> workers_;
};

void send(httplib::Response& res, int status, const json& doc) {
  res.status = status;
  res.set_content(serialize_document(doc), "application/json");
}

void send_error(httplib::Response& res, ErrorKind kind, const std::string& message) {
  send(res, http_status(kind), error_json(kind, message));
}

json body_of(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  return parse_document(req.body);
}

}  // namespace

struct Service::Impl {
  explicit Impl(ServiceConfig c)
      : config(std::move(c)),
        store(config.db_path),
        jobs(config.workers, config.max_queued_jobs, config.max_retained_jobs, config.compute_threads) {
    routes();
  }

  // Runs a handler with the error-to-status mapping every route shares.
  template <class Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const Error& e) {
        send_error(res, e.kind(), e.what());
      } catch (const json::exception& e) {
        send_error(res, ErrorKind::InvalidArgument, e.what());
      } catch (const std::exception& e) {
        send(res, 500, {{"error", {{"kind", "Internal"}, {"message", e.what()}, {"numeric", false}}}});
      }
    };
  }

  void submit(httplib::Response& res, const std::string& kind, std::function<json(const ComputeControl&)> work) {
    auto job = jobs.submit(kind, std::move(work));
    if (!job) {
      send(res, 503, {{"error", {{"kind", "QueueFull"}, {"message", "job queue is full"}, {"numeric", false}}}});
      return;
    }
    res.set_header("Location", "/v1/jobs/" + job->id);
    send(res, 202, job->describe());
  }

  std::shared_ptr<Job> job_or_throw(const httplib::Request& req) {
    auto job = jobs.find(req.path_params.at("id"));
    if (!job) throw Error(ErrorKind::NotFound, "unknown job " + req.path_params.at("id"));
    return job;
  }

  Session session_or_throw(const std::string& id) {
    auto s = store.load(id);
    if (!s) throw Error(ErrorKind::NotFound, "unknown session " + id);
    return std::move(*s);
  }

  void session_action(const std::string& route, const std::string& action) {
    server.Post("/v1/sessions/:id/" + route, guarded([this, action](const httplib::Request& req, httplib::Response& res) {
      Session s = session_or_throw(req.path_params.at("id"));
      json doc = body_of(req);
      if (!doc.is_object()) throw Error(ErrorKind::InvalidArgument, "request body must be an object");
      doc["action"] = action;
      const long long loaded = s.version();
      json result = s.apply(doc);
      store.update(s, loaded);
      send(res, 200, {{"result", result}, {"session", s.to_json()}});
    }));
  }

  void routes() {
    server.set_payload_max_length(config.max_body_bytes);
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return;
      const std::string kind = res.status == 413 ? "PayloadTooLarge" : res.status == 404 ? "NotFound" : "HttpError";
      res.set_content(serialize_document({{"error", {{"kind", kind}, {"message", httplib::status_message(res.status)},
                                                     {"numeric", false}}}}),
                      "application/json");
    });

    server.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
      send(res, 200, {{"status", "ok"}});
    });

    server.Post("/v1/design", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json request = body_of(req);
      // Reject malformed requests synchronously; only the search runs as a job.
      json probe = request;
      if (probe.is_object() && probe.contains("params") && probe.value("strategy", "") == "optmle") {
        probe["strategy"] = "bccstar";
      }
      (void)run_design(probe);
      submit(res, "design", [request](const ComputeControl& c) { return run_design(request, c); });
    }));

    server.Post("/v1/simulate", guarded([this](const httplib::Request& req, httplib::Response& res) {
      json scenario = body_of(req);
      (void)scenario_from_json(scenario);
      const unsigned threads = config.compute_threads;
      submit(res, "simulate", [scenario, threads](const ComputeControl& c) {
        if (c.cancel && c.cancel->load()) throw Error(ErrorKind::Cancelled, "job cancelled");
        return run_simulate(scenario, threads);
      });
    }));

    server.Post("/v1/fit", guarded([](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, run_fit(body_of(req)));
    }));

    server.Get("/v1/jobs/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, job_or_throw(req)->describe());
    }));

    server.Get("/v1/jobs/:id/result", guarded([this](const httplib::Request& req, httplib::Response& res) {
      auto job = job_or_throw(req);
      std::lock_guard lock(job->mutex);
      switch (job->status) {
        case JobStatus::Succeeded:
          res.status = 200;
          res.set_content(job->result, "application/json");
          return;
        case JobStatus::Failed:
        case JobStatus::Cancelled:
          send(res, job->error_status, job->error);
          return;
        default:
          send(res, 409, error_json(ErrorKind::IllegalTransition, "job " + job->id + " is " + to_string(job->status)));
      }
    }));

    server.Delete("/v1/jobs/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      auto job = job_or_throw(req);
      job->cancel = true;
      send(res, 202, job->describe());
    }));

    server.Post("/v1/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      Session s = Session::create(new_session_id(), body_of(req));
      store.insert(s);
      res.set_header("Location", "/v1/sessions/" + s.id());
      send(res, 201, s.to_json());
    }));

    server.Get("/v1/sessions/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, session_or_throw(req.path_params.at("id")).to_json());
    }));

    server.Get("/v1/sessions/:id/log", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, session_or_throw(req.path_params.at("id")).log());
    }));

    session_action("plan-wave", "plan");
    session_action("ingest", "ingest");
    session_action("refit", "refit");
    session_action("finalize", "finalize");
  }

  ServiceConfig config;
  SqliteSessionStore store;
  JobQueue jobs;
  httplib::Server server;
  std::thread thread;
};

Service::Service(ServiceConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Service::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw std::runtime_error("cannot listen on " + host + ":" + std::to_string(port));
}

void Service::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace twophase
