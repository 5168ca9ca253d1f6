// End-to-end acceptance checks. Prints one line per criterion and exits
// non-zero if any criterion fails. Pass criterion numbers as arguments to run
// a subset.

#include "cli.hpp"
#include "clusteriv/blocks.hpp"
#include "clusteriv/inference.hpp"
#include "clusteriv/jackknife.hpp"
#include "clusteriv/miar.hpp"
#include "clusteriv/montecarlo.hpp"
#include "clusteriv/rng.hpp"
#include "oracles.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

using namespace clusteriv;

namespace {

struct Result {
  enum Status { Pass, Fail, Skipped } status = Fail;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double relative(double a, double b) {
  const double s = std::max(std::abs(a), std::abs(b));
  return s == 0.0 ? 0.0 : std::abs(a - b) / s;
}

double relative(const Matrix& a, const Matrix& b) {
  const double s = std::max(a.cwiseAbs().maxCoeff(), b.cwiseAbs().maxCoeff());
  return s == 0.0 ? 0.0 : (a - b).cwiseAbs().maxCoeff() / s;
}

Result verdict(bool ok, std::string detail) {
  return {ok ? Result::Pass : Result::Fail, std::move(detail)};
}

// 1. Singleton clusters against individual-level jackknife formulas written
//    as matrix-vector products with Pdd = P_Z minus its diagonal.
Result singleton_reduction() {
  std::mt19937_64 g(101);
  std::uniform_int_distribution<int> N(10, 50), K(1, 8);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const int n = N(g);
    const int k = std::min(K(g), n - 2);
    const ClusteredDesign d = oracle::random_design(g, std::vector<std::size_t>(n, 1), k);
    const Vector beta = oracle::randn(g, 1, 1);
    const Vector e = d.y - d.X * beta;
    const Vector x = d.X.col(0);
    Matrix P = oracle::projection(d.Z);
    P.diagonal().setZero();
    const Matrix P2 = P.cwiseProduct(P);
    const Vector ee = e.cwiseProduct(e), xe = x.cwiseProduct(e);
    const Vector Px = P * x;
    const double dn = n, dk = k;
    const double ar = e.dot(P * e) / std::sqrt(dk);
    const double score = x.dot(P * e) / std::sqrt(dn);
    const double v_ar = 2.0 / dk * ee.dot(P2 * ee);
    const double v_s = (Px.cwiseProduct(e).squaredNorm() + xe.dot(P2 * xe)) / dn;
    const double c = 2.0 / std::sqrt(dn * dk) * xe.dot(P2 * ee);

    const KernelChoice plain = KernelChoice::PlainClusterJackknife;
    const VarianceBundle b = variance_bundle(d, beta, plain, VarianceEstimator::Plain);
    worst = std::max({worst, relative(ar_statistic(d, beta, plain), ar),
                      relative(score_statistic(d, beta, plain)(0), score),
                      relative(b.v_ar, v_ar), relative(b.v_s(0, 0), v_s), relative(b.c(0), c)});
  }
  return verdict(worst < 1e-10, "max relative error " + fmt("%.3g", worst));
}

// 2. Leave-cluster-out fits against regressions on the retained rows.
Result leave_cluster_out() {
  std::mt19937_64 g(202);
  std::uniform_int_distribution<std::size_t> Gd(5, 12), Kd(1, 3);
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    const std::size_t G = Gd(g);
    const auto sizes = oracle::random_sizes(g, G, 5);
    const ClusterBlocks b = ClusterBlocks::from_sizes(sizes);
    const auto n = static_cast<Eigen::Index>(b.n());
    const auto k = static_cast<Eigen::Index>(Kd(g));
    const Matrix Z = oracle::randn(g, n, k);
    const Vector v = oracle::randn(g, n, 1);

    const Matrix Pt = symmetric_jackknife_matrix(Z, b);
    for (std::size_t c = 0; c < G; ++c) {
      std::vector<Eigen::Index> keep;
      for (Eigen::Index i = 0; i < n; ++i)
        if (oracle::cluster_of(b, static_cast<std::size_t>(i)) != c) keep.push_back(i);
      const Matrix Zk = oracle::take_rows(Z, keep);
      Matrix rows = Matrix::Zero(static_cast<Eigen::Index>(b[c].length), n);
      const Matrix coef = Zk.colPivHouseholderQr().solve(Matrix::Identity(Zk.rows(), Zk.rows()));
      const Matrix Zc = Z.middleRows(static_cast<Eigen::Index>(b[c].start),
                                     static_cast<Eigen::Index>(b[c].length));
      const Matrix W = Zc * coef;  // rows of c against the retained observations
      for (std::size_t j = 0; j < keep.size(); ++j) rows.col(keep[j]) = W.col(static_cast<Eigen::Index>(j));
      worst = std::max(worst, relative(Matrix(Pt.middleRows(static_cast<Eigen::Index>(b[c].start),
                                                             static_cast<Eigen::Index>(b[c].length))),
                                       rows));
    }

    std::vector<std::size_t> all(G);
    std::iota(all.begin(), all.end(), 0);
    std::shuffle(all.begin(), all.end(), g);
    const std::vector<std::size_t> drop(all.begin(),
                                        all.begin() + static_cast<long>(1 + rep % 2));
    std::vector<std::size_t> sorted = drop;
    std::sort(sorted.begin(), sorted.end());
    const Vector fit = leave_clusters_out_fit(Z, v, b, sorted);
    for (std::size_t c = 0; c < G; ++c)
      worst = std::max(worst, relative(Matrix(oracle::seg(fit, b, c)),
                                       Matrix(oracle::leave_out_fit(Z, v, b, sorted, c))));
  }
  return verdict(worst < 1e-8, "max relative error " + fmt("%.3g", worst));
}

// 3. Kernel centring.
Result centring() {
  std::mt19937_64 g(303);
  std::uniform_int_distribution<std::size_t> Gd(6, 14);
  double max_block = 0.0, max_resid = 0.0;
  std::size_t max_l = 0;
  for (int rep = 0; rep < 30; ++rep) {
    const auto sizes = oracle::random_sizes(g, Gd(g), 4);
    std::size_t n = 0;
    for (auto s : sizes) n += s;
    const ClusteredDesign plain = oracle::random_design(g, sizes, 2);
    for (auto ch : {KernelChoice::PlainClusterJackknife, KernelChoice::SymmetricClusterJackknife}) {
      const Kernel K = build_kernel(plain, ch);
      max_block = std::max(max_block, max_abs_block_diagonal(K.K, plain.blocks));
      max_resid = std::max(max_resid, K.pre_zero_residual);
    }
    const std::size_t l = 1 + static_cast<std::size_t>(rep) % std::max<std::size_t>(1, n / 3);
    max_l = std::max(max_l, l);
    const ClusteredDesign w = oracle::random_design(g, sizes, 2, 1, static_cast<Eigen::Index>(l));
    const Kernel K = build_kernel(w, KernelChoice::ManyControls);
    max_block = std::max(max_block, max_abs_block_diagonal(K.K, w.blocks));
    max_resid = std::max(max_resid, K.pre_zero_residual);
  }
  return verdict(max_block == 0.0 && max_resid < 1e-8,
                 "max |diagonal block| " + fmt("%.3g", max_block) + ", max pre-enforcement residual " +
                     fmt("%.3g", max_resid) + ", l up to " + std::to_string(max_l));
}

// 4. Unbiasedness of V^AR and C with fixed Z and known error covariances.
Result unbiasedness() {
  const std::size_t n = 60, G = 20, reps = 5000;
  const Eigen::Index k = 4;
  const double zeta = 0.3, rho = 0.3;
  const ClusterBlocks b = ClusterBlocks::from_sizes(cluster_sizes(n, G, 3.0));
  std::mt19937_64 g(404);
  const Matrix Z = oracle::randn(g, static_cast<Eigen::Index>(n), k);
  Vector pi = Vector::Zero(k);
  pi(0) = 0.3;
  const Vector zpi = Z * pi;
  std::vector<double> mult(G);
  for (auto& m : mult) m = std::abs(oracle::randn(g, 1, 1)(0, 0));

  AnalyticVarianceInputs in;
  in.n = n;
  in.z_pi = zpi;
  for (std::size_t c = 0; c < G; ++c) {
    const auto s = static_cast<Eigen::Index>(b[c].length);
    const Matrix J = Matrix::Ones(s, s), I = Matrix::Identity(s, s);
    in.sigma.push_back(zeta * mult[c] * mult[c] * J + (1 - zeta) * I);
    in.xi.push_back({std::sqrt(rho) * (zeta * mult[c] * J + (1 - zeta) * I)});
    in.omega.push_back({zeta * J + (1 - zeta) * I});
  }
  const ClusteredDesign shape = make_design(Vector::Zero(static_cast<Eigen::Index>(n)),
                                            Matrix::Zero(static_cast<Eigen::Index>(n), 1), Z, b);
  const Kernel K = build_kernel(shape, KernelChoice::PlainClusterJackknife);
  const AnalyticVariances truth = analytic_variances(in, K.K, b, static_cast<std::size_t>(k));

  double sum_v = 0.0, sum_c = 0.0, sum_c2 = 0.0, sum_v2 = 0.0;
  for (std::size_t r = 0; r < reps; ++r) {
    NormalStream rng = NormalStream::for_replication(404, r);
    Vector eps(static_cast<Eigen::Index>(n)), eta(static_cast<Eigen::Index>(n));
    for (std::size_t c = 0; c < G; ++c) {
      const double eta_cl = rng.normal(), w1 = rng.normal();
      const double eps_cl = mult[c] * (std::sqrt(rho) * eta_cl + std::sqrt(1 - rho) * w1);
      for (std::size_t i = b[c].start; i < b[c].end(); ++i) {
        const double eta_i = rng.normal(), w2 = rng.normal();
        const auto row = static_cast<Eigen::Index>(i);
        eta(row) = std::sqrt(zeta) * eta_cl + std::sqrt(1 - zeta) * eta_i;
        eps(row) = std::sqrt(zeta) * eps_cl +
                   std::sqrt(1 - zeta) * (std::sqrt(rho) * eta_i + std::sqrt(1 - rho) * w2);
      }
    }
    const Vector x = zpi + eta;
    const ClusteredDesign d = make_design(eps, Matrix(x), Z, b);  // beta0 = 0
    const VarianceBundle vb = variance_bundle(d, K, Vector::Zero(1), VarianceEstimator::Plain);
    sum_v += vb.v_ar_raw;
    sum_v2 += vb.v_ar_raw * vb.v_ar_raw;
    sum_c += vb.c(0);
    sum_c2 += vb.c(0) * vb.c(0);
  }
  const double R = static_cast<double>(reps);
  const double mv = sum_v / R, mc = sum_c / R;
  const double sev = std::sqrt((sum_v2 / R - mv * mv) / R);
  const double sec = std::sqrt((sum_c2 / R - mc * mc) / R);
  const double ev = relative(mv, truth.v_ar), ec = relative(mc, (*truth.c)(0));
  return verdict(ev < 0.05 && ec < 0.10,
                 "V^AR mean " + fmt("%.5g", mv) + " vs " + fmt("%.5g", truth.v_ar) + " (" +
                     fmt("%.2f", 100 * ev) + "%, MC se " + fmt("%.2g", sev) + "); C mean " +
                     fmt("%.5g", mc) + " vs " + fmt("%.5g", (*truth.c)(0)) + " (" +
                     fmt("%.2f", 100 * ec) + "%, MC se " + fmt("%.2g", sec) + ")");
}

std::string rows_text(const RejectionTable& t) {
  std::ostringstream s;
  for (const auto& r : t.rows) s << ' ' << r.method << '@' << r.key << '=' << fmt("%.4f", r.rate());
  return s.str();
}

const RejectionRow& row(const RejectionTable& t, const std::string& m, double key) {
  for (const auto& r : t.rows)
    if (r.method == m && std::abs(r.key - key) < 1e-12) return r;
  throw std::logic_error("missing row " + m);
}

// 5. Size at the simulation defaults.
Result size() {
  McConfig c;
  c.reps = 2000;
  const RejectionTable t =
      size_experiment(c, mc_methods({"clj-ar", "clj-score", "clmi-ar"}), {1, 30, 60, 90});
  const RejectionTable jk = size_experiment(c, mc_methods({"jk-ar"}), {30});
  bool ok = true;
  for (const auto& r : t.rows) {
    const bool conservative_ok = r.method == "clmi-ar" && r.key == 90.0;
    const double lo = conservative_ok ? 0.02 : 0.03;
    // For the CLJ tests k = 90 is reported but not graded.
    if (r.key == 90.0 && r.method != "clmi-ar") continue;
    ok = ok && r.rate() >= lo && r.rate() <= 0.07 && r.errors == 0;
  }
  ok = ok && jk.rows[0].rate() > 0.10;
  return verdict(ok, rows_text(t) + rows_text(jk));
}

// 6. Power ordering.
Result power() {
  McConfig c;
  c.R = 100;
  c.k = 10;
  c.reps = 500;
  const RejectionTable t = power_experiment(c, mc_methods({"clj-ar", "clj-score"}), {-1.0, 0.0, 1.0});
  bool ok = true;
  for (const char* m : {"clj-ar", "clj-score"}) {
    const double base = row(t, m, 0.0).rate();
    ok = ok && row(t, m, -1.0).rate() - base >= 0.3 && row(t, m, 1.0).rate() - base >= 0.3;
  }
  c.k = 50;
  const RejectionTable u = power_experiment(c, mc_methods({"cluster-ar", "clj-ar"}), {-0.5, 0.5});
  for (double b : {-0.5, 0.5}) {
    const RejectionRow& a = row(u, "cluster-ar", b);
    const RejectionRow& j = row(u, "clj-ar", b);
    const double se = std::sqrt(a.se() * a.se() + j.se() * j.se());
    ok = ok && j.rate() - a.rate() > 2.0 * se;
  }
  return verdict(ok, "k=10:" + rows_text(t) + "; k=50:" + rows_text(u));
}

// 7. Invariances of the cluster many-instrument AR statistic.
double offdiag_form(const Matrix& P, const Vector& v) {
  double s = 0.0;
  for (Eigen::Index a = 0; a < P.rows(); ++a)
    for (Eigen::Index c = 0; c < P.cols(); ++c)
      if (a != c) s += v(a) * v(c) * P(a, c);
  return s;
}

Result miar_invariance() {
  std::mt19937_64 g(707);
  double worst_idem = 0.0, worst_trace = 0.0;
  bool exact = true;
  for (int inst = 0; inst < 5; ++inst) {
    const auto sizes = oracle::random_sizes(g, 8, 4);
    const ClusteredDesign d = oracle::random_design(g, sizes, 3);
    const Vector beta = Vector::Constant(1, 0.3);
    const ClusterMomentProjection p = cluster_moment_projection(d, beta);
    worst_idem = std::max(worst_idem, (p.P * p.P - p.P).cwiseAbs().maxCoeff());
    worst_trace = std::max(worst_trace, std::abs(p.P.trace() - 3.0));
    const double v0 = clmi_statistic(p).variance;

    std::multiset<double> flipped_data, flipped_form;
    for (unsigned mask = 0; mask < 256; ++mask) {
      Vector r(8);
      ClusteredDesign f = d;
      for (std::size_t c = 0; c < 8; ++c) {
        r(static_cast<Eigen::Index>(c)) = (mask >> c) & 1u ? -1.0 : 1.0;
        if ((mask >> c) & 1u) {
          // Flipping y and X flips eps(beta) on the cluster at every beta.
          const auto s = static_cast<Eigen::Index>(d.blocks[c].start);
          const auto l = static_cast<Eigen::Index>(d.blocks[c].length);
          f.y.segment(s, l) = -d.y.segment(s, l);
          f.X.middleRows(s, l) = -d.X.middleRows(s, l);
        }
      }
      const ClusterMomentProjection pf = cluster_moment_projection(f, beta);
      exact = exact && clmi_statistic(pf).variance == v0 &&
              pf.P.diagonal() == p.P.diagonal();
      for (Eigen::Index a = 0; a < 8; ++a)
        for (Eigen::Index c = 0; c < 8; ++c) exact = exact && pf.P(a, c) == r(a) * r(c) * p.P(a, c);
      flipped_data.insert(offdiag_form(pf.P, Vector::Ones(8)));
      flipped_form.insert(offdiag_form(p.P, r));
    }
    exact = exact && flipped_data == flipped_form;
  }
  return verdict(worst_idem < 1e-10 && worst_trace < 1e-10 && exact,
                 "max |P^2 - P| " + fmt("%.3g", worst_idem) + ", max |tr P - k| " +
                     fmt("%.3g", worst_trace) + ", sign-flip enumeration " +
                     (exact ? "exact" : "MISMATCH"));
}

// 8. Critical values.
Result critical_values() {
  double worst = 0.0;
  for (std::size_t k : {1u, 2u, 5u, 10u, 100u}) {
    const double dk = static_cast<double>(k);
    const double want = (oracle::chi2_quantile(0.95, dk) - dk) / std::sqrt(2.0 * dk);
    worst = std::max(worst, std::abs(critical_value(k, 0.05) - want));
  }
  const double lim = std::abs(critical_value(1000000, 0.05) - 1.6449);
  return verdict(worst < 1e-6 && lim < 1e-2,
                 "max error " + fmt("%.3g", worst) + ", |c(1e6) - 1.6449| = " + fmt("%.3g", lim));
}

// 9. Coverage of the inverted CLJ-AR confidence set.
Result coverage() {
  McConfig c;
  c.R = 100;
  c.k = 10;
  const std::size_t reps = 500;
  const MethodConfig m = parse_method("clj-ar");
  std::size_t covered = 0;
  for (std::size_t r = 0; r < reps; ++r) {
    const SimulatedData s = simulate_dataset(c, r);
    const ConfidenceSet cs = invert_confidence_set(s.design, m, 0.05);
    for (const auto& iv : cs.intervals)
      if (iv.lo <= c.beta0 && c.beta0 <= iv.hi) {
        ++covered;
        break;
      }
  }
  const double rate = static_cast<double>(covered) / static_cast<double>(reps);
  return verdict(std::abs(rate - 0.95) <= 0.025, "coverage " + fmt("%.3f", rate));
}

// 10. Application interval, when the replication data are available.
Result application() {
  const char* path = std::getenv("CLUSTERIV_DH_CSV");
  if (!path) return {Result::Skipped, "set CLUSTERIV_DH_CSV to the replication CSV to run"};
  auto env = [](const char* name, const char* fallback) {
    const char* v = std::getenv(name);
    return std::string(v ? v : fallback);
  };
  std::vector<std::string> args{"ci",      "--data",  path,
                                "--y",     env("CLUSTERIV_DH_Y", "war"),
                                "--x",     env("CLUSTERIV_DH_X", "queen"),
                                "--z",     env("CLUSTERIV_DH_Z", "fbm,sis"),
                                "--cluster", env("CLUSTERIV_DH_CLUSTER", "reign"),
                                "--method", "cluster-ar", "--grid", "-2:2:0.005", "--refine"};
  const std::string w = env("CLUSTERIV_DH_W", "");
  if (!w.empty()) {
    args.insert(args.end(), {"--w", w, "--partial-out"});
  }
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != cli::kOk) return verdict(false, "ci failed: " + err.str());
  const auto j = nlohmann::json::parse(out.str());
  if (j["intervals"].size() != 1) return verdict(false, "expected one interval: " + j["intervals"].dump());
  const double lo = j["intervals"][0]["lo"], hi = j["intervals"][0]["hi"];
  return verdict(std::abs(lo - 0.087) <= 0.005 && std::abs(hi - 0.827) <= 0.005,
                 "interval [" + fmt("%.4f", lo) + ", " + fmt("%.4f", hi) + "]");
}

struct Criterion {
  int id;
  std::function<Result()> run;
  double budget_s;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all{
      {1, singleton_reduction, 10},   {2, leave_cluster_out, 10}, {3, centring, 600},
      {4, unbiasedness, 120},         {5, size, 1800},            {6, power, 1200},
      {7, miar_invariance, 60},       {8, critical_values, 600},  {9, coverage, 1200},
      {10, application, 600}};
  std::set<int> pick;
  for (int i = 1; i < argc; ++i) pick.insert(std::atoi(argv[i]));

  bool failed = false;
  for (const auto& c : all) {
    if (!pick.empty() && !pick.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Result r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r = {Result::Fail, std::string("threw: ") + e.what()};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (r.status == Result::Pass && secs > c.budget_s) {
      r.status = Result::Fail;
      r.detail += "; over the " + fmt("%.0f", c.budget_s) + " s budget";
    }
    const char* tag = r.status == Result::Pass ? "PASS" : r.status == Result::Fail ? "FAIL" : "SKIPPED";
    std::printf("criterion %d: %s  %s  [%.1f s]\n", c.id, tag, r.detail.c_str(), secs);
    std::fflush(stdout);
    failed = failed || r.status == Result::Fail;
  }
  return failed ? 1 : 0;
}
