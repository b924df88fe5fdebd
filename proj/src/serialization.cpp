#include "twophase/serialization.hpp"

#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "twophase/error.hpp"

namespace twophase {
namespace {

template <class Derived>
json vector_json(const Eigen::MatrixBase<Derived>& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

[[noreturn]] void invalid(const std::string& what) { throw Error(ErrorKind::InvalidArgument, what); }

const json& field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) invalid(std::string("missing field '") + key + "'");
  return j.at(key);
}

double as_double(const json& j, const std::string& what) {
  if (!j.is_number()) invalid(what + " must be a number");
  return j.get<double>();
}

int as_int(const json& j, const std::string& what) {
  if (!j.is_number_integer()) invalid(what + " must be an integer");
  const auto v = j.get<long long>();
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) invalid(what + " out of range");
  return static_cast<int>(v);
}

std::uint64_t as_uint64(const json& j, const std::string& what) {
  if (!j.is_number_unsigned() && !(j.is_number_integer() && j.get<long long>() >= 0)) {
    invalid(what + " must be a non-negative integer");
  }
  return j.get<std::uint64_t>();
}

Eigen::VectorXd double_vector(const json& j, const std::string& what) {
  if (!j.is_array()) invalid(what + " must be an array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = as_double(j[i], what);
  return v;
}

Eigen::VectorXi int_vector(const json& j, const std::string& what) {
  if (!j.is_array()) invalid(what + " must be an array");
  Eigen::VectorXi v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = as_int(j[i], what);
  return v;
}

int binary(const json& j, const std::string& what) {
  const int v = as_int(j, what);
  if (v != 0 && v != 1) invalid(what + " must be 0 or 1");
  return v;
}

ErrorRateSpec rates_from_json(const json& j, ErrorTarget target) {
  return {as_double(field(j, "fpr"), "fpr"), as_double(field(j, "tpr"), "tpr"), target};
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    out.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string serialize_document(const json& doc) { return doc.dump(2) + "\n"; }

json parse_document(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::ParseError, e.what());
  }
}

json error_json(ErrorKind kind, const std::string& message) {
  return {{"error", {{"kind", to_string(kind)}, {"message", message}, {"numeric", is_numeric_failure(kind)}}}};
}

json to_json(const ModelSpec& spec) {
  json levels = json::array();
  for (const auto& z : spec.z_levels) levels.push_back(vector_json(z));
  json terms = json::object();
  for (SubModel s : kSubModels) {
    json list = json::array();
    for (const Term& t : spec.terms_for(s)) list.push_back(t.name());
    terms[to_string(s)] = list;
  }
  return {{"z_levels", levels}, {"terms", terms}, {"parameter_names", spec.parameter_names()}};
}

ModelSpec model_from_json(const json& j) {
  if (!j.is_object()) invalid("model must be an object");
  std::vector<Eigen::VectorXd> levels{Eigen::VectorXd()};
  if (j.contains("z_levels")) {
    const json& zl = j.at("z_levels");
    if (zl.is_number_integer()) {
      levels = ModelSpec::indicator_levels(as_int(zl, "z_levels"));
    } else if (zl.is_array()) {
      levels.clear();
      for (const auto& level : zl) levels.push_back(double_vector(level, "z level"));
    } else {
      invalid("z_levels must be an integer or an array of feature vectors");
    }
  }
  ModelSpec spec = ModelSpec::main_effects(levels);
  if (j.contains("terms")) {
    const json& terms = j.at("terms");
    for (SubModel s : kSubModels) {
      const std::string key(to_string(s));
      if (!terms.contains(key)) continue;
      std::vector<Term> list;
      for (const auto& t : terms.at(key)) {
        if (!t.is_string()) invalid("terms must be strings");
        list.push_back(Term::parse(t.get<std::string>()));
      }
      spec.terms_for(s) = std::move(list);
    }
  }
  spec.validate();
  return spec;
}

json to_json(const ParamVector& theta) {
  json j = {{"beta", theta.beta},
            {"eta_ystar", vector_json(theta.eta_ystar)},
            {"eta_xstar", vector_json(theta.eta_xstar)},
            {"eta_y", vector_json(theta.eta_y)},
            {"eta_x", vector_json(theta.eta_x)}};
  if (theta.z_marginal.size() > 0) j["z_marginal"] = vector_json(theta.z_marginal);
  return j;
}

ParamVector params_from_json(const json& j, const ModelSpec& spec) {
  ParamVector theta;
  theta.beta = as_double(field(j, "beta"), "beta");
  theta.eta_ystar = double_vector(field(j, "eta_ystar"), "eta_ystar");
  theta.eta_xstar = double_vector(field(j, "eta_xstar"), "eta_xstar");
  theta.eta_y = double_vector(field(j, "eta_y"), "eta_y");
  theta.eta_x = double_vector(field(j, "eta_x"), "eta_x");
  if (j.contains("z_marginal") && !j.at("z_marginal").is_null()) {
    theta.z_marginal = double_vector(j.at("z_marginal"), "z_marginal");
  }
  validate(theta, spec);
  return theta;
}

json to_json(const StratumTable& strata) {
  json a = json::array();
  for (int k = 0; k < strata.size(); ++k) {
    const auto& key = strata.key(k);
    a.push_back({{"ystar", key.ystar}, {"xstar", key.xstar}, {"z", key.z}, {"count", strata.count(k)}});
  }
  return a;
}

StratumTable strata_from_json(const json& j) {
  StratumTable table;
  if (j.is_object() && j.contains("counts")) {
    const int levels = j.contains("z_levels") ? as_int(j.at("z_levels"), "z_levels") : 1;
    table = StratumTable::from_counts(int_vector(j.at("counts"), "counts"), levels);
  } else if (j.is_object() && j.contains("strata")) {
    return strata_from_json(j.at("strata"));
  } else if (j.is_array()) {
    std::vector<StratumKey> keys;
    Eigen::VectorXi counts(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
      const json& s = j[i];
      keys.push_back({binary(field(s, "ystar"), "ystar"), binary(field(s, "xstar"), "xstar"),
                      s.contains("z") ? as_int(s.at("z"), "z") : 0});
      counts(static_cast<Eigen::Index>(i)) = as_int(field(s, "count"), "count");
    }
    table = StratumTable(std::move(keys), counts);
  } else {
    invalid("strata must be an array of {ystar, xstar, z, count} or {counts, z_levels}");
  }
  table.validate();
  return table;
}

json to_json(const Bounds& bounds) {
  return {{"lower", vector_json(bounds.lower)}, {"upper", vector_json(bounds.upper)}};
}

json to_json(const Design& design) {
  return {{"strata", to_json(design.strata)},
          {"allocation", vector_json(design.allocation)},
          {"n", design.n()},
          {"sampling_probabilities", vector_json(design.sampling_probabilities())}};
}

json to_json(const SearchTrace& trace) {
  json iterations = json::array();
  for (const auto& it : trace.iterations) {
    json top = json::array();
    for (const auto& c : it.top) top.push_back({{"allocation", vector_json(c.allocation)}, {"variance", c.variance}});
    iterations.push_back({{"step", it.step},
                          {"rows", it.rows},
                          {"skipped", it.skipped},
                          {"bounds", to_json(it.bounds)},
                          {"best_allocation", vector_json(it.best_allocation)},
                          {"best_variance", it.best_variance},
                          {"top", top},
                          {"summary",
                           {{"min", it.summary.min},
                            {"q1", it.summary.q1},
                            {"median", it.summary.median},
                            {"q3", it.summary.q3},
                            {"max", it.summary.max}}}});
  }
  return {{"iterations", iterations},
          {"design", to_json(trace.design)},
          {"variance", trace.variance},
          {"early_stopped", trace.early_stopped}};
}

json to_json(const WaveStep& step) {
  json j = {{"strategy", step.strategy},
            {"size", step.size},
            {"increment", vector_json(step.increment)},
            {"cumulative", vector_json(step.cumulative)},
            {"fallback", !step.fallback_reason.empty()},
            {"fallback_reason", step.fallback_reason}};
  j["trace"] = step.trace ? to_json(*step.trace) : json(nullptr);
  j["theta_hat"] = step.theta_hat ? to_json(*step.theta_hat) : json(nullptr);
  return j;
}

json to_json(const WavePlan& plan) {
  json waves = json::array();
  for (const auto& w : plan.waves) waves.push_back(to_json(w));
  return {{"n", plan.n},
          {"sizes", plan.sizes},
          {"waves", waves},
          {"cumulative", vector_json(plan.cumulative)},
          {"fallback_used", plan.fallback_used()}};
}

json to_json(const FitResult& fit, const ModelSpec& spec) {
  json j = {{"theta_hat", to_json(fit.theta_hat)},
            {"parameter_names", spec.parameter_names()},
            {"loglik", fit.loglik},
            {"gradient_norm", fit.gradient_norm},
            {"converged", fit.converged},
            {"iterations", fit.iterations},
            {"boundary", fit.boundary}};
  if (fit.information_at_mle) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < fit.information_at_mle->rows(); ++r) {
      rows.push_back(vector_json(fit.information_at_mle->row(r).transpose()));
    }
    j["information_at_mle"] = rows;
  }
  return j;
}

json to_json(const MetricsRow& row) {
  return {{"design", row.design}, {"successes", row.successes}, {"failures", row.failures}, {"mean", row.mean},
          {"pct_bias", row.pct_bias}, {"se", row.se}, {"re", row.re}, {"ri", row.ri}};
}

json to_json(const GridSchedule& schedule) {
  json j = {{"m", schedule.m}, {"max_rows", schedule.max_rows}, {"steps", schedule.steps},
            {"refine_steps", schedule.refine_steps}};
  j["early_stop_rel_change"] =
      schedule.early_stop_rel_change ? json(*schedule.early_stop_rel_change) : json(nullptr);
  return j;
}

GridSchedule schedule_from_json(const json& j) {
  GridSchedule s;
  if (j.contains("m")) s.m = as_int(j.at("m"), "m");
  if (j.contains("max_rows")) s.max_rows = as_uint64(j.at("max_rows"), "max_rows");
  if (j.contains("steps") && !j.at("steps").is_null()) {
    for (const auto& v : j.at("steps")) s.steps.push_back(as_int(v, "steps"));
  }
  if (j.contains("refine_steps")) s.refine_steps = j.at("refine_steps").get<bool>();
  if (j.contains("early_stop_rel_change") && !j.at("early_stop_rel_change").is_null()) {
    s.early_stop_rel_change = as_double(j.at("early_stop_rel_change"), "early_stop_rel_change");
  }
  s.validate();
  return s;
}

Weighting weighting_from_json(const json& j) {
  if (!j.contains("weighting")) return Weighting::Observed;
  const std::string w = j.at("weighting").get<std::string>();
  if (w == "observed") return Weighting::Observed;
  if (w == "expected") return Weighting::Expected;
  invalid("weighting must be 'observed' or 'expected'");
}

json to_json(const SimScenario& sc) {
  json j = {{"N", sc.N},
            {"n", sc.n},
            {"m", sc.m},
            {"replicates", sc.replicates},
            {"seed", sc.seed},
            {"p_y0", sc.p_y0},
            {"p_x", sc.p_x},
            {"beta", sc.beta},
            {"ystar_errors", {{"fpr", sc.ystar_errors.fpr}, {"tpr", sc.ystar_errors.tpr}}},
            {"xstar_errors", {{"fpr", sc.xstar_errors.fpr}, {"tpr", sc.xstar_errors.tpr}}},
            {"xstar_on_y", sc.xstar_on_y},
            {"ystar_on_xstar", sc.ystar_on_xstar},
            {"ystar_on_x", sc.ystar_on_x},
            {"designs", sc.designs},
            {"max_rows", sc.max_rows},
            {"allow_boundary_nuisance", sc.allow_boundary_nuisance}};
  if (sc.covariate) {
    const auto& c = *sc.covariate;
    j["covariate"] = {{"p_z", c.p_z},         {"beta_z", c.beta_z},
                      {"x_z", c.x_z},         {"lambda", c.lambda},
                      {"delta_xstar", c.delta_xstar}, {"delta_ystar", c.delta_ystar},
                      {"interaction_in_model", c.interaction_in_model}};
  } else {
    j["covariate"] = nullptr;
  }
  return j;
}

SimScenario scenario_from_json(const json& j) {
  if (!j.is_object()) invalid("scenario must be an object");
  SimScenario sc;
  auto num = [&](const char* key, double& out) {
    if (j.contains(key)) out = as_double(j.at(key), key);
  };
  auto integer = [&](const char* key, int& out) {
    if (j.contains(key)) out = as_int(j.at(key), key);
  };
  integer("N", sc.N);
  integer("n", sc.n);
  integer("m", sc.m);
  integer("replicates", sc.replicates);
  if (j.contains("seed")) sc.seed = as_uint64(j.at("seed"), "seed");
  num("p_y0", sc.p_y0);
  num("p_x", sc.p_x);
  num("beta", sc.beta);
  if (j.contains("ystar_errors")) sc.ystar_errors = rates_from_json(j.at("ystar_errors"), ErrorTarget::Outcome);
  if (j.contains("xstar_errors")) sc.xstar_errors = rates_from_json(j.at("xstar_errors"), ErrorTarget::Exposure);
  num("xstar_on_y", sc.xstar_on_y);
  num("ystar_on_xstar", sc.ystar_on_xstar);
  num("ystar_on_x", sc.ystar_on_x);
  if (j.contains("designs")) sc.designs = j.at("designs").get<std::vector<std::string>>();
  if (j.contains("max_rows")) sc.max_rows = as_uint64(j.at("max_rows"), "max_rows");
  if (j.contains("threads")) sc.threads = static_cast<unsigned>(as_uint64(j.at("threads"), "threads"));
  if (j.contains("allow_boundary_nuisance")) sc.allow_boundary_nuisance = j.at("allow_boundary_nuisance").get<bool>();
  if (j.contains("covariate") && !j.at("covariate").is_null()) {
    const json& c = j.at("covariate");
    CovariateConfig cov;
    auto cnum = [&](const char* key, double& out) {
      if (c.contains(key)) out = as_double(c.at(key), key);
    };
    cnum("p_z", cov.p_z);
    cnum("beta_z", cov.beta_z);
    cnum("x_z", cov.x_z);
    cnum("lambda", cov.lambda);
    cnum("delta_xstar", cov.delta_xstar);
    cnum("delta_ystar", cov.delta_ystar);
    if (c.contains("interaction_in_model")) cov.interaction_in_model = c.at("interaction_in_model").get<bool>();
    sc.covariate = cov;
  }
  sc.validate();
  return sc;
}

json to_json(const Record& r) {
  json j = {{"v", r.v}, {"ystar", r.ystar}, {"xstar", r.xstar}, {"z", r.z}};
  j["y"] = r.y ? json(*r.y) : json(nullptr);
  j["x"] = r.x ? json(*r.x) : json(nullptr);
  return j;
}

Record record_from_json(const json& j) {
  Record r;
  r.v = j.contains("v") ? binary(j.at("v"), "v") : 1;
  r.ystar = binary(field(j, "ystar"), "ystar");
  r.xstar = binary(field(j, "xstar"), "xstar");
  r.z = j.contains("z") ? as_int(j.at("z"), "z") : 0;
  if (j.contains("y") && !j.at("y").is_null()) r.y = binary(j.at("y"), "y");
  if (j.contains("x") && !j.at("x").is_null()) r.x = binary(j.at("x"), "x");
  return r;
}

std::vector<Record> read_records_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorKind::ParseError, "empty CSV");
  const auto header = split_csv_line(line);
  const std::vector<std::string> base{"v", "ystar", "xstar", "y", "x"};
  if (header.size() < 5 || header.size() > 6 || !std::equal(base.begin(), base.end(), header.begin()) ||
      (header.size() == 6 && header[5] != "z")) {
    throw Error(ErrorKind::ParseError, "CSV header must be v,ystar,xstar,y,x[,z]");
  }
  std::vector<Record> records;
  std::size_t row = 1;
  auto cell_int = [&](const std::string& s, const char* col) {
    int v = 0;
    std::size_t used = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size()) {
      throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + ": bad value '" + s + "' in column " + col);
    }
    return v;
  };
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw Error(ErrorKind::ParseError, "row " + std::to_string(row) + " has " + std::to_string(cells.size()) +
                                             " fields, expected " + std::to_string(header.size()));
    }
    Record r;
    r.v = cell_int(cells[0], "v");
    r.ystar = cell_int(cells[1], "ystar");
    r.xstar = cell_int(cells[2], "xstar");
    if (!cells[3].empty() && cells[3] != "NA") r.y = cell_int(cells[3], "y");
    if (!cells[4].empty() && cells[4] != "NA") r.x = cell_int(cells[4], "x");
    if (header.size() == 6) r.z = cell_int(cells[5], "z");
    records.push_back(r);
  }
  return records;
}

void write_records_csv(std::ostream& out, const std::vector<Record>& records) {
  out << "v,ystar,xstar,y,x,z\n";
  for (const auto& r : records) {
    out << r.v << ',' << r.ystar << ',' << r.xstar << ',';
    if (r.y) out << *r.y;
    out << ',';
    if (r.x) out << *r.x;
    out << ',' << r.z << '\n';
  }
}

}  // namespace twophase
