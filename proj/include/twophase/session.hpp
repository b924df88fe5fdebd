#pragma once

// Resumable multi-wave audit. A session is driven by actions:
//
//   created --plan--> wave-planned --ingest--> wave-data-ingested --refit--> refitted
//   refitted --plan--> wave-planned ... refitted --finalize--> finalized
//
// Every accepted action is appended to the audit log; replaying the log from
// an empty session reproduces the state exactly.

#include <optional>
#include <string>
#include <vector>

#include "twophase/serialization.hpp"

namespace twophase {

enum class SessionState { Created, WavePlanned, WaveDataIngested, Refitted, Finalized };

std::string to_string(SessionState s);
SessionState parse_session_state(const std::string& name);

struct SessionConfig {
  StratumTable strata;
  ModelSpec spec;
  std::optional<ParamVector> prior;
  int n = 0;
  int waves = 2;
  GridSchedule schedule;
  Weighting weighting = Weighting::Observed;
  bool allow_boundary_nuisance = false;

  // {"strata", "n", "waves"?, "params"?: {"model"?, "theta"?}, "m"?, "max_rows"?,
  //  "steps"?, "weighting"?, "allow_boundary_nuisance"?}
  static SessionConfig from_json(const json& j);
};

class Session {
 public:
  // Validates `config` and records it as the first log entry.
  static Session create(std::string id, const json& config);
  // Rebuilds a session by applying `log` to a fresh one.
  static Session replay(std::string id, const json& log);
  // Inverse of to_json (trusts the document, which this class wrote).
  static Session from_json(const json& doc);

  // Action documents: {"action": "plan" | "ingest" | "refit" | "finalize", ...}.
  // "ingest" carries "records": [{ystar, xstar, z, y, x}] and/or
  // "cells": [{ystar, xstar, z, y, x, count}]. Returns the action's result.
  json apply(const json& action);

  const std::string& id() const noexcept { return id_; }
  SessionState state() const noexcept { return state_; }
  long long version() const noexcept { return version_; }
  const json& log() const noexcept { return log_; }
  const SessionConfig& config() const noexcept { return config_; }
  int current_wave() const noexcept { return static_cast<int>(waves_.size()); }
  const Eigen::VectorXi& validated_counts() const noexcept { return validated_; }

  // Phase I strata as unvalidated records plus every ingested validated record.
  Dataset dataset() const;

  json to_json() const;

 private:
  Session() = default;

  json plan();
  json ingest(const json& action);
  json refit();
  json finalize();
  [[noreturn]] void illegal(const std::string& action) const;

  std::string id_;
  json config_doc_;
  SessionConfig config_;
  SessionState state_ = SessionState::Created;
  long long version_ = 0;
  std::vector<int> sizes_;
  json waves_ = json::array();          // one WaveStep document per planned wave, plus ingest/fit details
  Eigen::VectorXi planned_increment_;   // current wave's increment
  Eigen::VectorXi ingested_;            // current wave's ingested counts
  Eigen::VectorXi validated_;           // cumulative validated counts
  std::vector<Record> records_;         // validated records, ingest order
  std::optional<ParamVector> theta_hat_;
  std::string pending_failure_;
  json final_ = nullptr;
  json log_ = json::array();
};

}  // namespace twophase
