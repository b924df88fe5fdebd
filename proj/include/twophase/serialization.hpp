#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

#include "twophase/designs.hpp"
#include "twophase/grid_search.hpp"
#include "twophase/information.hpp"
#include "twophase/likelihood.hpp"
#include "twophase/model.hpp"
#include "twophase/simulation.hpp"

namespace twophase {

using json = nlohmann::json;

// Canonical text form shared by every writer: two-space indent, trailing newline.
std::string serialize_document(const json& doc);
// Throws ParseError with the parser's position on malformed text.
json parse_document(const std::string& text);

json error_json(ErrorKind kind, const std::string& message);

// {"z_levels": [[...], ...] | <int levels>, "terms": {"ystar": [...], ...}}.
// Missing terms give main effects; missing z_levels a single level.
json to_json(const ModelSpec& spec);
ModelSpec model_from_json(const json& j);

// {"beta", "eta_ystar", "eta_xstar", "eta_y", "eta_x", "z_marginal"?}.
json to_json(const ParamVector& theta);
ParamVector params_from_json(const json& j, const ModelSpec& spec);

// [{"ystar", "xstar", "z", "count"}, ...] or {"counts": [...], "z_levels": L}.
json to_json(const StratumTable& strata);
StratumTable strata_from_json(const json& j);

json to_json(const Bounds& bounds);
json to_json(const Design& design);
json to_json(const SearchTrace& trace);
json to_json(const WaveStep& step);
json to_json(const WavePlan& plan);
json to_json(const FitResult& fit, const ModelSpec& spec);
json to_json(const MetricsRow& row);

json to_json(const GridSchedule& schedule);
// Reads "m", "max_rows", "steps", "early_stop_rel_change" from a request object.
GridSchedule schedule_from_json(const json& j);
Weighting weighting_from_json(const json& j);

json to_json(const SimScenario& scenario);
SimScenario scenario_from_json(const json& j);

json to_json(const Record& record);
Record record_from_json(const json& j);

// Header "v,ystar,xstar,y,x[,z]"; y and x empty when v = 0; z is a level index.
std::vector<Record> read_records_csv(std::istream& in);
void write_records_csv(std::ostream& out, const std::vector<Record>& records);

}  // namespace twophase
