#pragma once

// JSON and CSV renderings of results. Every JSON document carries
// "schema_version"; CSV column orders are fixed.

#include "clusteriv/data.hpp"
#include "clusteriv/diagnostics.hpp"
#include "clusteriv/inference.hpp"
#include "clusteriv/montecarlo.hpp"

#include <json.hpp>

#include <ostream>
#include <string>

namespace clusteriv {

inline constexpr int kSchemaVersion = 1;

nlohmann::json to_json(const TestOutcome& o);
nlohmann::json to_json(const ConfidenceSet& cs);
nlohmann::json to_json(const FirstStageReport& r);
nlohmann::json to_json(const ValidationReport& r);
nlohmann::json to_json(const McConfig& c);
nlohmann::json to_json(const RejectionTable& t);

// Adds schema_version and the document kind ("test", "ci", ...).
nlohmann::json document(const std::string& kind, nlohmann::json body);

// method,k_or_beta,rate,se,reps,errors
void write_csv(std::ostream& os, const RejectionTable& t);
// beta,reject,statistic,p_value,warning
void write_grid_csv(std::ostream& os, const ConfidenceSet& cs);

std::string summary_line(const TestOutcome& o);
std::string summary_line(const ConfidenceSet& cs);
std::string summary_line(const FirstStageReport& r);

}  // namespace clusteriv
