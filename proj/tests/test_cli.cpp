#include "cli.hpp"
#include "oracles.hpp"

#include <doctest.h>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

using nlohmann::json;
namespace fs = std::filesystem;
namespace cli = clusteriv::cli;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run run(std::vector<std::string> args) {
  std::ostringstream o, e;
  const int c = cli::run(args, o, e);
  return {c, o.str(), e.str()};
}

fs::path scratch() {
  const fs::path d = fs::temp_directory_path() / "clusteriv_cli_test";
  fs::create_directories(d);
  return d;
}

// G clusters of sizes 3..5 with two instruments and a strong first stage.
fs::path write_csv(const std::string& name, bool collinear, double beta = 0.5,
                   std::uint64_t seed = 1) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> N;
  const fs::path p = scratch() / name;
  std::ofstream f(p);
  f.precision(17);
  f << "war,queen,fbm,sis,reign\n";
  for (int c = 0; c < 30; ++c) {
    const int size = 3 + c % 3;
    for (int i = 0; i < size; ++i) {
      const double z1 = N(g), z2 = collinear ? 2.0 * z1 : N(g);
      const double eta = N(g), x = z1 + 0.5 * z2 + eta;
      const double y = beta * x + 0.5 * eta + N(g);
      f << y << ',' << x << ',' << z1 << ',' << z2 << ",c" << c << '\n';
    }
  }
  return p;
}

std::vector<std::string> data_flags(const fs::path& p) {
  return {"--data", p.string(), "--y", "war", "--x", "queen", "--z", "fbm,sis", "--cluster",
          "reign"};
}

std::vector<std::string> cat(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::set<std::string> keys(const json& j) {
  std::set<std::string> k;
  for (auto it = j.begin(); it != j.end(); ++it) k.insert(it.key());
  return k;
}

}  // namespace

TEST_CASE("test subcommand") {
  const fs::path p = write_csv("d.csv", false);
  const Run r = run(cat(cat({"test"}, data_flags(p)), {"--method", "clj-ar", "--beta", "0"}));
  REQUIRE(r.code == cli::kOk);
  const json j = json::parse(r.out);
  CHECK(j["schema_version"] == 1);
  CHECK(j["kind"] == "test");
  CHECK(j["reject"].is_boolean());
  CHECK(keys(j) == std::set<std::string>{"schema_version", "kind", "method", "beta", "statistic",
                                         "threshold", "p_value", "p_value_normal", "reject",
                                         "alpha", "variance", "k", "G", "n", "p", "warnings",
                                         "validation"});
  CHECK(j["G"] == 30);
  CHECK(r.err.find("clj-ar") != std::string::npos);

  SUBCASE("missing --cluster is a usage error") {
    const Run m = run({"test", "--data", p.string(), "--y", "war", "--x", "queen", "--z",
                       "fbm,sis", "--beta", "0"});
    CHECK(m.code == cli::kUsage);
  }
  SUBCASE("unknown method is a usage error") {
    CHECK(run(cat(cat({"test"}, data_flags(p)), {"--method", "wald", "--beta", "0"})).code ==
          cli::kUsage);
  }
  SUBCASE("rank-deficient instruments are a data error") {
    const fs::path q = write_csv("collinear.csv", true);
    const Run m = run(cat(cat({"test"}, data_flags(q)), {"--beta", "0"}));
    CHECK(m.code == cli::kDataError);
    CHECK(m.err.find("RankDeficient") != std::string::npos);
  }
  SUBCASE("missing file is a data error") {
    CHECK(run(cat(cat({"test"}, data_flags(scratch() / "nope.csv")), {"--beta", "0"})).code ==
          cli::kDataError);
  }
  SUBCASE("--out writes the file and keeps stdout clean") {
    const fs::path o = scratch() / "out.json";
    const Run m = run(cat(cat({"test"}, data_flags(p)), {"--beta", "0", "--out", o.string()}));
    CHECK(m.code == cli::kOk);
    CHECK(m.out.empty());
    std::ifstream f(o);
    CHECK(json::parse(f)["kind"] == "test");
  }
}

TEST_CASE("ci subcommand") {
  const fs::path p = write_csv("ci.csv", false);
  const fs::path dump = scratch() / "grid.csv";
  const Run r = run(cat(cat({"ci"}, data_flags(p)), {"--method", "clj-ar", "--grid", "-1:2:0.01",
                                                     "--refine", "--dump-grid", dump.string()}));
  REQUIRE(r.code == cli::kOk);
  const json j = json::parse(r.out);
  CHECK(keys(j) == std::set<std::string>{"schema_version", "kind", "method", "alpha", "intervals",
                                         "grid", "refined", "warnings", "point_warnings"});
  CHECK(j["refined"] == true);
  std::ifstream f(dump);
  std::string header;
  std::getline(f, header);
  CHECK(header == "beta,reject,statistic,p_value,warning");
  std::size_t lines = 0;
  for (std::string l; std::getline(f, l);) ++lines;
  CHECK(lines == 301);

  SUBCASE("empty set") {
    const Run e = run(cat(cat({"ci"}, data_flags(p)),
                          {"--method", "cluster-ar", "--grid", "20:21:0.5"}));
    CHECK(e.code == cli::kOk);
    const json je = json::parse(e.out);
    CHECK(je["intervals"].empty());
    CHECK(je["warnings"][0] == "empty confidence set");
  }
  SUBCASE("unbounded at the grid edge") {
    const Run e = run(cat(cat({"ci"}, data_flags(p)),
                          {"--method", "clj-ar", "--grid", "0.49:0.51:0.01"}));
    CHECK(e.code == cli::kOk);
    const json je = json::parse(e.out);
    REQUIRE(je["intervals"].size() == 1);
    CHECK(je["intervals"][0]["unbounded_lo"] == true);
    CHECK(je["intervals"][0]["unbounded_hi"] == true);
  }
  SUBCASE("bad grid") {
    CHECK(run(cat(cat({"ci"}, data_flags(p)), {"--grid", "1:0:0.1"})).code == cli::kUsage);
  }
}

TEST_CASE("diagnose subcommand") {
  const fs::path p = write_csv("diag.csv", false);
  const Run r = run(cat({"diagnose"}, data_flags(p)));
  REQUIRE(r.code == cli::kOk);
  const json j = json::parse(r.out);
  CHECK(j["kind"] == "diagnose");
  REQUIRE(j["first_stage"].size() == 3);
  CHECK(keys(j["first_stage"][0]) ==
        std::set<std::string>{"flavor", "value", "infinite", "k", "p", "G", "n"});
  CHECK(j["validation"]["G"] == 30);
}

TEST_CASE("simulate subcommands") {
  const std::vector<std::string> size{"simulate", "size", "--n",    "120",     "--G",
                                      "24",       "--k",  "1,3,5", "--methods", "clj-ar,clmi-ar",
                                      "--reps",   "20",   "--seed", "7"};
  const Run a = run(size), b = run(size);
  REQUIRE(a.code == cli::kOk);
  CHECK(a.out == b.out);
  std::istringstream in(a.out);
  std::string header;
  std::getline(in, header);
  CHECK(header == "method,k_or_beta,rate,se,reps,errors");
  std::size_t rows = 0;
  for (std::string l; std::getline(in, l);) ++rows;
  CHECK(rows == 6);

  const Run threaded = run(cat(size, {"--threads", "3"}));
  CHECK(threaded.out == a.out);

  const Run pw = run({"simulate", "power", "--n", "120", "--G", "24", "--k", "2", "--reps", "5",
                      "--beta-grid", "-1:1:0.1", "--methods", "clj-ar,clj-score", "--format",
                      "json"});
  REQUIRE(pw.code == cli::kOk);
  const json j = json::parse(pw.out);
  CHECK(j["kind"] == "rejection_table");
  CHECK(j["schema_version"] == 1);
  CHECK(j["rows"].size() == 42);
  CHECK(j["rows"][20]["beta"] == 1.0);
  CHECK(j["rows"][10]["beta"] == 0.0);

  CHECK(run({"simulate", "size", "--zeta", "1.5", "--reps", "2"}).code == cli::kUsage);
  CHECK(run({"simulate", "size", "--methods", "bogus", "--reps", "2"}).code == cli::kUsage);
  CHECK(run({"simulate", "size", "--n", "5", "--G", "10"}).code == cli::kUsage);
  CHECK(run({"simulate"}).code == cli::kUsage);
  CHECK(run({"frobnicate"}).code == cli::kUsage);
}

TEST_CASE("config file merges under explicit flags") {
  const fs::path cfg = scratch() / "cfg.json";
  {
    std::ofstream f(cfg);
    f << R"({"n": 120, "G": 24, "reps": 4, "seed": 3, "k": "2", "methods": "clj-ar"})";
  }
  const Run a = run({"--config", cfg.string(), "simulate", "size"});
  REQUIRE(a.code == cli::kOk);
  CHECK(a.out.find("clj-ar,2,") != std::string::npos);
  const Run b = run({"--config", cfg.string(), "simulate", "size", "--k", "3"});
  REQUIRE(b.code == cli::kOk);
  CHECK(b.out.find("clj-ar,3,") != std::string::npos);
  CHECK(b.out.find("clj-ar,2,") == std::string::npos);

  const fs::path bad = scratch() / "bad.json";
  {
    std::ofstream f(bad);
    f << "{not json";
  }
  CHECK(run({"--config", bad.string(), "simulate", "size"}).code == cli::kUsage);
}
