#include "cli.hpp"

#include "clusteriv/data.hpp"
#include "clusteriv/diagnostics.hpp"
#include "clusteriv/error.hpp"
#include "clusteriv/inference.hpp"
#include "clusteriv/montecarlo.hpp"
#include "clusteriv/report.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace clusteriv::cli {

namespace {

using nlohmann::json;

// Bad flag values caught after parsing; reported with exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ',')) {
    cur.erase(0, cur.find_first_not_of(" \t"));
    cur.erase(cur.find_last_not_of(" \t") + 1);
    if (!cur.empty()) out.push_back(cur);
  }
  return out;
}

double to_double(const std::string& s, const std::string& what) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw UsageError(what + ": '" + s + "' is not a number");
  }
  if (pos != s.size() || !std::isfinite(v)) throw UsageError(what + ": '" + s + "' is not a number");
  return v;
}

std::vector<double> number_list(const std::string& s, const std::string& what) {
  std::vector<double> out;
  for (const auto& t : split_list(s)) out.push_back(to_double(t, what));
  if (out.empty()) throw UsageError(what + " is empty");
  return out;
}

// "lo:hi:step"
Grid parse_grid(const std::string& s, const std::string& what) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, ':')) parts.push_back(cur);
  if (parts.size() != 3) throw UsageError(what + " must look like lo:hi:step");
  Grid g{to_double(parts[0], what), to_double(parts[1], what), to_double(parts[2], what)};
  if (!(g.lo < g.hi) || !(g.step > 0.0)) throw UsageError(what + " needs lo < hi and step > 0");
  return g;
}

struct DataArgs {
  std::string data, y, x, z, w, cluster;
  bool partial_out = false;

  void add(CLI::App* app) {
    app->add_option("--data", data, "CSV file with a header row")->required();
    app->add_option("--y", y, "Outcome column")->required();
    app->add_option("--x", x, "Endogenous regressor column(s), comma separated")->required();
    app->add_option("--z", z, "Instrument columns, comma separated")->required();
    app->add_option("--w", w, "Exogenous control columns, comma separated");
    app->add_option("--cluster", cluster, "Cluster label column")->required();
    app->add_flag("--partial-out", partial_out,
                  "Premultiply y, X, Z by M_W and drop the controls");
  }

  CsvSchema schema() const {
    return {y, split_list(x), split_list(z), split_list(w), cluster};
  }

  ClusteredDesign load() const {
    ClusteredDesign d = load_csv(std::filesystem::path(data), schema());
    if (partial_out) d = partial_out_controls(d);
    return d;
  }
};

struct OutArgs {
  std::string out;
  void add(CLI::App* app) {
    app->add_option("--out", out, "Write the JSON/CSV result here instead of standard output");
  }
};

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw UsageError("--alpha must lie in (0, 1)");
}

void emit(const std::string& text, const OutArgs& o, std::ostream& out) {
  if (o.out.empty()) {
    out << text;
    return;
  }
  std::ofstream f(o.out, std::ios::binary);
  if (!f) throw Error(ErrorCode::InvalidArgument, "cannot write " + o.out);
  f << text;
}

// Expands --config FILE into flags placed right after the subcommand path, so
// explicit flags that follow take precedence.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::optional<std::string> path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      path = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (!path) return rest;

  std::ifstream f(*path);
  if (!f) throw UsageError("cannot open config " + *path);
  json cfg;
  try {
    f >> cfg;
  } catch (const json::exception& e) {
    throw UsageError("config " + *path + ": " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config must be a JSON object");

  std::vector<std::string> flags;
  for (const auto& [key, val] : cfg.items()) {
    const std::string flag = "--" + key;
    if (val.is_boolean()) {
      if (val.get<bool>()) flags.push_back(flag);
    } else if (val.is_array()) {
      std::string joined;
      for (const auto& v : val) {
        if (!joined.empty()) joined += ',';
        joined += v.is_string() ? v.get<std::string>() : v.dump();
      }
      flags.push_back(flag + "=" + joined);
    } else if (val.is_string()) {
      flags.push_back(flag + "=" + val.get<std::string>());
    } else if (val.is_number()) {
      flags.push_back(flag + "=" + val.dump());
    } else {
      throw UsageError("config key '" + key + "' must be a scalar or a list");
    }
  }

  // The subcommand path is the leading run of non-flag tokens.
  std::size_t pos = 0;
  while (pos < rest.size() && !rest[pos].empty() && rest[pos][0] != '-') ++pos;
  rest.insert(rest.begin() + static_cast<std::ptrdiff_t>(pos), flags.begin(), flags.end());
  return rest;
}

struct McArgs {
  McConfig cfg;
  std::string methods = "clj-ar,clj-score,clmi-ar";
  std::string format = "csv";
  OutArgs out;

  void add(CLI::App* app) {
    app->add_option("--n", cfg.n, "Observations")->capture_default_str();
    app->add_option("--G", cfg.G, "Clusters")->capture_default_str();
    app->add_option("--gamma", cfg.gamma, "Cluster size imbalance")->capture_default_str();
    app->add_option("--zeta", cfg.zeta, "Within-cluster dependence")->capture_default_str();
    app->add_option("--rho", cfg.rho, "Endogeneity")->capture_default_str();
    app->add_option("--h", cfg.h, "Heteroskedasticity exponent")->capture_default_str();
    app->add_option("--R", cfg.R, "Instrument relevance")->capture_default_str();
    app->add_option("--beta0", cfg.beta0, "True coefficient")->capture_default_str();
    app->add_option("--reps", cfg.reps, "Replications")->capture_default_str();
    app->add_option("--seed", cfg.base_seed, "Base seed")->capture_default_str();
    app->add_option("--alpha", cfg.alpha, "Significance level")->capture_default_str();
    app->add_option("--threads", cfg.threads, "Worker threads")->capture_default_str();
    app->add_option("--methods", methods, "Methods, comma separated")->capture_default_str();
    app->add_option("--format", format, "csv or json")
        ->check(CLI::IsMember({"csv", "json"}))
        ->capture_default_str();
    out.add(app);
  }

  std::vector<McMethod> method_list() const {
    std::vector<McMethod> ms;
    for (const auto& nm : split_list(methods)) {
      try {
        ms.push_back(mc_method(nm));
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
    }
    if (ms.empty()) throw UsageError("--methods is empty");
    return ms;
  }

  void check() const {
    try {
      validate(cfg);
    } catch (const Error& e) {
      throw UsageError(e.what());
    }
  }

  void write(const RejectionTable& t, std::ostream& os) const {
    std::ostringstream s;
    if (format == "csv") {
      write_csv(s, t);
    } else {
      s << document("rejection_table", to_json(t)).dump(2) << '\n';
    }
    emit(s.str(), out, os);
  }
};

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Identification-robust IV inference with clustered data"};
  // --h is the heteroskedasticity exponent, so help is long-form only.
  app.set_help_flag("--help", "Print this help message and exit");
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.add_option("--config", "JSON file of flag values; explicit flags override it");

  // test
  auto* t = app.add_subcommand("test", "Test H0: beta0 = beta");
  t->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  DataArgs t_data;
  t_data.add(t);
  std::string t_method = "clj-ar", t_beta;
  double t_alpha = 0.05;
  OutArgs t_out;
  t->add_option("--method", t_method, "Test to run")->capture_default_str();
  t->add_option("--beta", t_beta, "Hypothesised coefficient(s), comma separated")->required();
  t->add_option("--alpha", t_alpha, "Significance level")->capture_default_str();
  t_out.add(t);

  // ci
  auto* c = app.add_subcommand("ci", "Confidence set by test inversion (one regressor)");
  c->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  DataArgs c_data;
  c_data.add(c);
  std::string c_method = "clj-ar", c_grid = "-2:2:0.005", c_dump;
  double c_alpha = 0.05;
  bool c_refine = false;
  std::size_t c_threads = 1;
  OutArgs c_out;
  c->add_option("--method", c_method, "Test to invert")->capture_default_str();
  c->add_option("--grid", c_grid, "Grid lo:hi:step")->capture_default_str();
  c->add_option("--alpha", c_alpha, "Significance level")->capture_default_str();
  c->add_flag("--refine", c_refine, "Bisect interval endpoints");
  c->add_option("--threads", c_threads, "Worker threads")->capture_default_str();
  c->add_option("--dump-grid", c_dump, "Write per-grid-point decisions as CSV");
  c_out.add(c);

  // diagnose
  auto* g = app.add_subcommand("diagnose", "Data checks and first-stage F statistics");
  g->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  DataArgs g_data;
  g_data.add(g);
  std::string g_flavor = "all";
  OutArgs g_out;
  g->add_option("--flavor", g_flavor, "homoskedastic, robust, effective or all")
      ->check(CLI::IsMember({"homoskedastic", "robust", "effective", "all"}))
      ->capture_default_str();
  g_out.add(g);

  // simulate size | power
  auto* s = app.add_subcommand("simulate", "Monte Carlo size and power experiments");
  s->require_subcommand(1);
  auto* ss = s->add_subcommand("size", "Rejection rates at the true beta over k");
  ss->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  McArgs ss_args;
  ss_args.add(ss);
  std::string ss_k = "1,30,60,90";
  ss->add_option("--k", ss_k, "Instrument counts, comma separated")->capture_default_str();
  auto* sp = s->add_subcommand("power", "Rejection rates over hypothesised beta");
  sp->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  McArgs sp_args;
  sp_args.cfg.reps = 500;
  sp_args.add(sp);
  std::string sp_grid = "-1:1:0.1";
  sp->add_option("--k", sp_args.cfg.k, "Instruments")->capture_default_str();
  sp->add_option("--beta-grid", sp_grid, "Hypothesised values lo:hi:step")->capture_default_str();

  std::vector<std::string> args;
  try {
    args = expand_config(raw_args);
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (t->parsed()) {
      check_alpha(t_alpha);
      MethodConfig m;
      try {
        m = parse_method(t_method);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const std::vector<double> b = number_list(t_beta, "--beta");
      if (b.size() != split_list(t_data.x).size()) {
        throw UsageError("--beta needs one value per --x column");
      }
      const ClusteredDesign d = t_data.load();
      const Vector beta = Eigen::Map<const Vector>(b.data(), static_cast<Eigen::Index>(b.size()));
      const TestOutcome o = run_test(d, m, beta, t_alpha);
      json body = to_json(o);
      body["validation"] = to_json(validate(d));
      emit(document("test", body).dump(2) + "\n", t_out, out);
      err << summary_line(o) << '\n';
    } else if (c->parsed()) {
      check_alpha(c_alpha);
      MethodConfig m;
      try {
        m = parse_method(c_method);
      } catch (const Error& e) {
        throw UsageError(e.what());
      }
      const Grid grid = parse_grid(c_grid, "--grid");
      if (split_list(c_data.x).size() != 1) throw UsageError("ci needs exactly one --x column");
      const ClusteredDesign d = c_data.load();
      const ConfidenceSet cs =
          invert_confidence_set(d, m, c_alpha, grid, c_refine, std::max<std::size_t>(1, c_threads));
      if (!c_dump.empty()) {
        std::ofstream f(c_dump, std::ios::binary);
        if (!f) throw Error(ErrorCode::InvalidArgument, "cannot write " + c_dump);
        write_grid_csv(f, cs);
      }
      emit(document("ci", to_json(cs)).dump(2) + "\n", c_out, out);
      err << summary_line(cs) << '\n';
      for (const auto& w : cs.warnings) err << "warning: " << w << '\n';
    } else if (g->parsed()) {
      const ClusteredDesign d = g_data.load();
      json body;
      body["validation"] = to_json(validate(d));
      json reports = json::array();
      std::vector<FirstStageFlavor> flavors;
      if (g_flavor == "all") {
        flavors = {FirstStageFlavor::Homoskedastic, FirstStageFlavor::Robust,
                   FirstStageFlavor::Effective};
      } else {
        flavors = {parse_first_stage_flavor(g_flavor)};
      }
      for (const auto f : flavors) {
        // With several regressors only the homoskedastic flavor is defined.
        if (g_flavor == "all" && d.p() > 1 && f != FirstStageFlavor::Homoskedastic) continue;
        const FirstStageReport r = first_stage_f(d, f);
        reports.push_back(to_json(r));
        err << summary_line(r) << '\n';
      }
      body["first_stage"] = reports;
      emit(document("diagnose", body).dump(2) + "\n", g_out, out);
    } else if (ss->parsed()) {
      ss_args.check();
      std::vector<std::size_t> ks;
      for (double v : number_list(ss_k, "--k")) {
        if (v < 1 || v != std::floor(v)) throw UsageError("--k values must be positive integers");
        ks.push_back(static_cast<std::size_t>(v));
      }
      const auto methods = ss_args.method_list();
      const RejectionTable table = size_experiment(ss_args.cfg, methods, ks);
      ss_args.write(table, out);
      err << "size experiment: " << table.rows.size() << " rows, " << ss_args.cfg.reps
          << " replications each\n";
    } else if (sp->parsed()) {
      sp_args.check();
      const Grid grid = parse_grid(sp_grid, "--beta-grid");
      std::vector<double> betas;
      for (std::size_t i = 0; i < grid.size(); ++i) {
        // Snap to the grid's decimal resolution so 0.1 steps print cleanly.
        betas.push_back(std::round(grid.at(i) * 1e10) / 1e10);
      }
      const auto methods = sp_args.method_list();
      const RejectionTable table = power_experiment(sp_args.cfg, methods, betas);
      sp_args.write(table, out);
      err << "power experiment: " << table.rows.size() << " rows, " << sp_args.cfg.reps
          << " replications each\n";
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  }
  return kOk;
}

}  // namespace clusteriv::cli
