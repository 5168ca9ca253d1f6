#include "clusteriv/report.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

namespace clusteriv {

using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

json vec(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v(i));
  return a;
}

json method_json(const MethodConfig& m) {
  return {{"name", method_name(m)},
          {"test", to_string(m.method)},
          {"kernel", to_string(m.kernel)},
          {"estimator", to_string(m.estimator)},
          {"ignore_clusters", m.ignore_clusters}};
}

}  // namespace

json document(const std::string& kind, json body) {
  body["schema_version"] = kSchemaVersion;
  body["kind"] = kind;
  return body;
}

json to_json(const TestOutcome& o) {
  json j = {{"method", method_json(o.method)},
            {"beta", vec(o.beta)},
            {"statistic", o.statistic},
            {"threshold", o.threshold},
            {"p_value", o.p_value},
            {"reject", o.reject},
            {"alpha", o.alpha},
            {"variance", o.variance},
            {"k", o.k},
            {"G", o.G},
            {"n", o.n},
            {"p", o.p},
            {"warnings", o.warnings}};
  j["p_value_normal"] = o.p_value_normal ? json(*o.p_value_normal) : json(nullptr);
  return j;
}

json to_json(const ConfidenceSet& cs) {
  json iv = json::array();
  for (const auto& i : cs.intervals) {
    iv.push_back({{"lo", i.lo},
                  {"hi", i.hi},
                  {"unbounded_lo", i.unbounded_lo},
                  {"unbounded_hi", i.unbounded_hi}});
  }
  json pw = json::array();
  for (const auto& p : cs.points) {
    if (!p.warning.empty()) pw.push_back({{"beta", p.beta}, {"warning", p.warning}});
  }
  return {{"method", method_json(cs.method)},
          {"alpha", cs.alpha},
          {"intervals", iv},
          {"grid", {{"lo", cs.grid.lo}, {"hi", cs.grid.hi}, {"step", cs.grid.step}}},
          {"refined", cs.refined},
          {"warnings", cs.warnings},
          {"point_warnings", pw}};
}

json to_json(const FirstStageReport& r) {
  json j = {{"flavor", to_string(r.flavor)}, {"infinite", r.infinite},
            {"k", r.k},                      {"p", r.p},
            {"G", r.G},                      {"n", r.n}};
  j["value"] = r.infinite ? json(nullptr) : json(r.value);
  return j;
}

json to_json(const ValidationReport& r) {
  return {{"n", r.n},
          {"k", r.k},
          {"p", r.p},
          {"l", r.l},
          {"G", r.G},
          {"n_max", r.n_max},
          {"rank_z", r.rank_z},
          {"k_less_than_G", r.k_less_than_G},
          {"max_leverage", r.max_leverage},
          {"max_leverage_cluster", r.max_leverage_cluster},
          {"n_max_over_G", r.n_max_over_G},
          {"warnings", r.warnings}};
}

json to_json(const McConfig& c) {
  return {{"n", c.n},         {"G", c.G},         {"gamma", c.gamma}, {"zeta", c.zeta},
          {"rho", c.rho},     {"h", c.h},         {"R", c.R},         {"k", c.k},
          {"beta0", c.beta0}, {"reps", c.reps},   {"seed", c.base_seed},
          {"alpha", c.alpha}};
}

json to_json(const RejectionTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    rows.push_back({{"method", r.method},
                    {t.key_name, r.key},
                    {"rate", r.rate()},
                    {"se", r.se()},
                    {"reps", r.reps},
                    {"errors", r.errors}});
  }
  json cfg = to_json(t.config);
  if (t.key_name == "k") cfg.erase("k");
  return {{"key", t.key_name}, {"config", cfg}, {"rows", rows}};
}

void write_csv(std::ostream& os, const RejectionTable& t) {
  os << "method,k_or_beta,rate,se,reps,errors\n";
  for (const auto& r : t.rows) {
    os << csv_field(r.method) << ',' << num(r.key) << ',' << num(r.rate()) << ',' << num(r.se())
       << ',' << r.reps << ',' << r.errors << '\n';
  }
}

void write_grid_csv(std::ostream& os, const ConfidenceSet& cs) {
  os << "beta,reject,statistic,p_value,warning\n";
  for (const auto& p : cs.points) {
    os << num(p.beta) << ',' << (p.reject ? 1 : 0) << ',' << num(p.statistic) << ','
       << num(p.p_value) << ',' << csv_field(p.warning) << '\n';
  }
}

std::string summary_line(const TestOutcome& o) {
  std::ostringstream s;
  s << method_name(o.method) << " at beta =";
  for (Eigen::Index i = 0; i < o.beta.size(); ++i) s << ' ' << num(o.beta(i));
  s << ": statistic " << num(o.statistic) << ", threshold " << num(o.threshold) << ", p-value "
    << num(o.p_value) << " -> " << (o.reject ? "reject" : "do not reject") << " at alpha "
    << num(o.alpha);
  return s.str();
}

std::string summary_line(const ConfidenceSet& cs) {
  std::ostringstream s;
  s << num(100.0 * (1.0 - cs.alpha)) << "% " << method_name(cs.method) << " set: ";
  if (cs.intervals.empty()) return s.str() + "empty";
  for (std::size_t i = 0; i < cs.intervals.size(); ++i) {
    const auto& iv = cs.intervals[i];
    if (i > 0) s << " U ";
    s << (iv.unbounded_lo ? "(" : "[") << num(iv.lo) << ", " << num(iv.hi)
      << (iv.unbounded_hi ? ")" : "]");
  }
  return s.str();
}

std::string summary_line(const FirstStageReport& r) {
  return std::string(to_string(r.flavor)) + " first-stage F = " +
         (r.infinite ? std::string("inf") : num(r.value));
}

}  // namespace clusteriv
