#include "twophase/session.hpp"

#include <array>

#include "twophase/requests.hpp"

namespace twophase {
namespace {

constexpr std::array<std::pair<SessionState, const char*>, 5> kStateNames = {{
    {SessionState::Created, "created"},
    {SessionState::WavePlanned, "wave-planned"},
    {SessionState::WaveDataIngested, "wave-data-ingested"},
    {SessionState::Refitted, "refitted"},
    {SessionState::Finalized, "finalized"},
}};

json counts_json(const Eigen::VectorXi& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

Eigen::VectorXi counts_from(const json& a) {
  Eigen::VectorXi v(static_cast<Eigen::Index>(a.size()));
  for (std::size_t i = 0; i < a.size(); ++i) v(static_cast<Eigen::Index>(i)) = a[i].get<int>();
  return v;
}

std::string key_text(const StratumKey& k) {
  return "(ystar=" + std::to_string(k.ystar) + ", xstar=" + std::to_string(k.xstar) + ", z=" + std::to_string(k.z) + ")";
}

}  // namespace

std::string to_string(SessionState s) {
  for (const auto& [state, name] : kStateNames) {
    if (state == s) return name;
  }
  return "unknown";
}

SessionState parse_session_state(const std::string& name) {
  for (const auto& [state, text] : kStateNames) {
    if (name == text) return state;
  }
  throw Error(ErrorKind::ParseError, "unknown session state '" + name + "'");
}

SessionConfig SessionConfig::from_json(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidArgument, "session config must be an object");
  if (!j.contains("strata")) throw Error(ErrorKind::InvalidArgument, "missing field 'strata'");
  SessionConfig c;
  c.strata = strata_from_json(j.at("strata"));
  const json params = j.contains("params") ? j.at("params") : json::object();
  c.spec = model_for(params, c.strata);
  if (params.contains("theta") && !params.at("theta").is_null()) c.prior = params_from_json(params.at("theta"), c.spec);
  if (!j.contains("n") || !j.at("n").is_number_integer()) {
    throw Error(ErrorKind::InvalidArgument, "n must be an integer");
  }
  c.n = j.at("n").get<int>();
  if (c.n <= 0) throw Error(ErrorKind::InvalidArgument, "n must be positive");
  if (c.n > c.strata.total()) throw Error(ErrorKind::InfeasibleBudget, "n exceeds the Phase I size");
  if (j.contains("waves")) {
    if (!j.at("waves").is_number_integer()) throw Error(ErrorKind::InvalidArgument, "waves must be an integer");
    c.waves = j.at("waves").get<int>();
  }
  (void)wave_sizes(c.n, c.waves);
  c.schedule = schedule_from_json(j);
  c.weighting = weighting_from_json(j);
  if (j.contains("allow_boundary_nuisance")) c.allow_boundary_nuisance = j.at("allow_boundary_nuisance").get<bool>();
  for (const auto& key : c.strata.keys()) {
    if (key.z >= c.spec.num_z_levels()) throw Error(ErrorKind::InvalidArgument, "stratum z level outside the model");
  }
  return c;
}

Session Session::create(std::string id, const json& config) {
  Session s;
  s.id_ = std::move(id);
  s.config_ = SessionConfig::from_json(config);
  s.config_doc_ = config;
  s.sizes_ = wave_sizes(s.config_.n, s.config_.waves);
  const int K = s.config_.strata.size();
  s.planned_increment_ = Eigen::VectorXi::Zero(K);
  s.ingested_ = Eigen::VectorXi::Zero(K);
  s.validated_ = Eigen::VectorXi::Zero(K);
  s.log_.push_back({{"seq", 0}, {"action", "create"}, {"config", config}});
  return s;
}

Session Session::replay(std::string id, const json& log) {
  if (!log.is_array() || log.empty() || log[0].value("action", "") != "create") {
    throw Error(ErrorKind::InvalidArgument, "audit log must start with a create entry");
  }
  Session s = create(std::move(id), log[0].at("config"));
  for (std::size_t i = 1; i < log.size(); ++i) {
    json action = log[i];
    action.erase("seq");
    s.apply(action);
  }
  return s;
}

Session Session::from_json(const json& doc) {
  Session s = create(doc.at("id").get<std::string>(), doc.at("config"));
  s.state_ = parse_session_state(doc.at("state").get<std::string>());
  s.version_ = doc.at("version").get<long long>();
  s.waves_ = doc.at("waves");
  s.planned_increment_ = counts_from(doc.at("planned_increment"));
  s.ingested_ = counts_from(doc.at("ingested"));
  s.validated_ = counts_from(doc.at("validated_counts"));
  s.records_.clear();
  for (const auto& r : doc.at("records")) s.records_.push_back(record_from_json(r));
  if (!doc.at("theta_hat").is_null()) s.theta_hat_ = params_from_json(doc.at("theta_hat"), s.config_.spec);
  s.pending_failure_ = doc.at("pending_failure").get<std::string>();
  s.final_ = doc.at("final");
  s.log_ = doc.at("log");
  return s;
}

json Session::apply(const json& action) {
  if (!action.is_object() || !action.contains("action") || !action.at("action").is_string()) {
    throw Error(ErrorKind::InvalidArgument, "action document needs an 'action' string");
  }
  if (action.contains("expected_version") && action.at("expected_version").get<long long>() != version_) {
    throw Error(ErrorKind::VersionConflict, "session " + id_ + " is at version " + std::to_string(version_));
  }
  const std::string name = action.at("action").get<std::string>();
  json result;
  if (name == "plan") {
    result = plan();
  } else if (name == "ingest") {
    result = ingest(action);
  } else if (name == "refit") {
    result = refit();
  } else if (name == "finalize") {
    result = finalize();
  } else {
    throw Error(ErrorKind::InvalidArgument, "unknown action '" + name + "'");
  }
  json entry = action;
  entry.erase("expected_version");
  entry["seq"] = log_.size();
  log_.push_back(std::move(entry));
  ++version_;
  return result;
}

void Session::illegal(const std::string& action) const {
  throw Error(ErrorKind::IllegalTransition,
              "cannot " + action + " in state " + to_string(state_) + " (wave " + std::to_string(waves_.size()) + " of " +
                  std::to_string(sizes_.size()) + ")");
}

json Session::plan() {
  const bool first = state_ == SessionState::Created;
  if (!(first || state_ == SessionState::Refitted) || waves_.size() >= sizes_.size()) illegal("plan a wave");
  const std::size_t w = waves_.size();
  // Shortfalls from earlier waves roll into the current one so the total stays n.
  int later = 0;
  for (std::size_t i = w + 1; i < sizes_.size(); ++i) later += sizes_[i];
  const int size = std::max(0, config_.n - validated_.sum() - later);
  const std::optional<ParamVector> theta = first ? config_.prior : theta_hat_;
  WaveStep step = plan_wave(config_.spec, config_.strata, validated_, size, pending_failure_.empty() ? theta : std::nullopt,
                            config_.schedule, config_.weighting);
  if (!pending_failure_.empty()) {
    step.strategy = "bccstar-fallback";
    step.fallback_reason = pending_failure_;
  }
  planned_increment_ = step.increment;
  ingested_.setZero();
  json doc = twophase::to_json(step);
  doc["ingested"] = counts_json(ingested_);
  doc["fit"] = nullptr;
  doc["fit_error"] = nullptr;
  waves_.push_back(doc);
  state_ = SessionState::WavePlanned;
  return doc;
}

json Session::ingest(const json& action) {
  if (state_ != SessionState::WavePlanned && state_ != SessionState::WaveDataIngested) illegal("ingest data");
  std::vector<Record> incoming;
  auto add = [&](const json& r, int count) {
    Record rec = record_from_json(r);
    if (!rec.y || !rec.x) throw Error(ErrorKind::InvalidArgument, "ingested records need validated y and x");
    rec.v = 1;
    for (int c = 0; c < count; ++c) incoming.push_back(rec);
  };
  if (action.contains("records")) {
    for (const auto& r : action.at("records")) add(r, 1);
  }
  if (action.contains("cells")) {
    for (const auto& c : action.at("cells")) {
      if (!c.contains("count") || !c.at("count").is_number_integer() || c.at("count").get<int>() < 0) {
        throw Error(ErrorKind::InvalidArgument, "cells need a non-negative integer count");
      }
      add(c, c.at("count").get<int>());
    }
  }
  if (incoming.empty()) throw Error(ErrorKind::InvalidArgument, "ingest needs at least one record");

  Eigen::VectorXi added = Eigen::VectorXi::Zero(config_.strata.size());
  for (const Record& r : incoming) {
    const auto k = config_.strata.find(r.stratum());
    if (!k) throw Error(ErrorKind::InvalidArgument, "record stratum " + key_text(r.stratum()) + " is not in the session");
    ++added(*k);
  }
  for (int k = 0; k < added.size(); ++k) {
    if (ingested_(k) + added(k) > planned_increment_(k)) {
      throw Error(ErrorKind::CapacityExceeded,
                  "stratum " + key_text(config_.strata.key(k)) + ": " + std::to_string(ingested_(k) + added(k)) +
                      " records exceed the planned " + std::to_string(planned_increment_(k)));
    }
  }
  records_.insert(records_.end(), incoming.begin(), incoming.end());
  ingested_ += added;
  validated_ += added;
  waves_.back()["ingested"] = counts_json(ingested_);
  state_ = SessionState::WaveDataIngested;
  return {{"ingested", counts_json(ingested_)}, {"remaining", counts_json(planned_increment_ - ingested_)},
          {"validated_counts", counts_json(validated_)}};
}

json Session::refit() {
  if (state_ != SessionState::WaveDataIngested) illegal("refit");
  const bool last = waves_.size() == sizes_.size();
  FitOptions options;
  options.allow_boundary_nuisance = config_.allow_boundary_nuisance;
  options.compute_information = last;
  json& wave = waves_.back();
  json result;
  try {
    const FitResult fit = fit_mle(dataset(), std::nullopt, options);
    theta_hat_ = fit.theta_hat;
    pending_failure_.clear();
    wave["theta_hat"] = twophase::to_json(fit.theta_hat);
    wave["fit"] = twophase::to_json(fit, config_.spec);
    wave["fit_error"] = nullptr;
    result = {{"fit", wave["fit"]}, {"fallback", false}};
  } catch (const Error& e) {
    if (!is_numeric_failure(e.kind())) throw;
    theta_hat_.reset();
    pending_failure_ = std::string(to_string(ErrorKind::WaveFitFailed)) + ": " + e.what();
    wave["fit"] = nullptr;
    wave["fit_error"] = error_json(e.kind(), e.what())["error"];
    result = {{"fit", nullptr}, {"fallback", true}, {"fit_error", wave["fit_error"]}};
  }
  state_ = SessionState::Refitted;
  return result;
}

json Session::finalize() {
  if (state_ != SessionState::Refitted || waves_.size() != sizes_.size()) illegal("finalize");
  bool fallback = false;
  for (const auto& w : waves_) fallback = fallback || w.at("strategy") == "bccstar-fallback";
  const json& last = waves_.back();
  final_ = {{"n", config_.n},
            {"sizes", sizes_},
            {"validated_counts", counts_json(validated_)},
            {"fallback_used", fallback},
            {"fit", last.at("fit")},
            {"fit_error", last.at("fit_error")}};
  state_ = SessionState::Finalized;
  return final_;
}

Dataset Session::dataset() const {
  Dataset data{config_.spec, {}};
  const StratumTable& strata = config_.strata;
  for (int k = 0; k < strata.size(); ++k) {
    const StratumKey& key = strata.key(k);
    Record r;
    r.ystar = key.ystar;
    r.xstar = key.xstar;
    r.z = key.z;
    data.records.insert(data.records.end(), static_cast<std::size_t>(strata.count(k) - validated_(k)), r);
  }
  data.records.insert(data.records.end(), records_.begin(), records_.end());
  return data;
}

json Session::to_json() const {
  json records = json::array();
  for (const auto& r : records_) records.push_back(twophase::to_json(r));
  bool fallback = !pending_failure_.empty();
  for (const auto& w : waves_) fallback = fallback || w.at("strategy") == "bccstar-fallback";
  json next = json::array();
  switch (state_) {
    case SessionState::Created: next = {"plan"}; break;
    case SessionState::WavePlanned: next = {"ingest"}; break;
    case SessionState::WaveDataIngested: next = {"ingest", "refit"}; break;
    case SessionState::Refitted: next = waves_.size() < sizes_.size() ? json{"plan"} : json{"finalize"}; break;
    case SessionState::Finalized: break;
  }
  return {{"id", id_},
          {"version", version_},
          {"state", to_string(state_)},
          {"allowed_actions", next},
          {"config", config_doc_},
          {"strata", twophase::to_json(config_.strata)},
          {"model", twophase::to_json(config_.spec)},
          {"sizes", sizes_},
          {"current_wave", waves_.size()},
          {"waves", waves_},
          {"planned_increment", counts_json(planned_increment_)},
          {"ingested", counts_json(ingested_)},
          {"validated_counts", counts_json(validated_)},
          {"records", records},
          {"theta_hat", theta_hat_ ? twophase::to_json(*theta_hat_) : json(nullptr)},
          {"pending_failure", pending_failure_},
          {"fallback_used", fallback},
          {"final", final_},
          {"log", log_}};
}

}  // namespace twophase
