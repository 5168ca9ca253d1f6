#include "clusteriv/inference.hpp"

#include "clusteriv/distributions.hpp"
#include "clusteriv/error.hpp"
#include "clusteriv/miar.hpp"
#include "clusteriv/parallel.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>

namespace clusteriv {

const char* to_string(Method m) {
  switch (m) {
    case Method::ClusterAR: return "cluster-ar";
    case Method::CljAR: return "clj-ar";
    case Method::CljScore: return "clj-score";
    case Method::ClmiAR: return "clmi-ar";
  }
  return "unknown";
}

MethodConfig parse_method(const std::string& name) {
  MethodConfig m;
  std::string rest = name;
  const auto take_suffix = [&rest](const std::string& suf) {
    if (rest.size() > suf.size() && rest.compare(rest.size() - suf.size(), suf.size(), suf) == 0) {
      rest.erase(rest.size() - suf.size());
      return true;
    }
    return false;
  };
  if (take_suffix("-cf")) m.estimator = VarianceEstimator::CrossFit;
  if (take_suffix("-sym")) {
    m.kernel = KernelChoice::SymmetricClusterJackknife;
  } else if (take_suffix("-mc")) {
    m.kernel = KernelChoice::ManyControls;
  }
  const bool modified = m.estimator != VarianceEstimator::Plain ||
                        m.kernel != KernelChoice::PlainClusterJackknife;
  if (rest == "clj-ar") {
    m.method = Method::CljAR;
  } else if (rest == "clj-score") {
    m.method = Method::CljScore;
  } else if (rest == "jk-ar" || rest == "jk-score") {
    m.method = rest == "jk-ar" ? Method::CljAR : Method::CljScore;
    m.ignore_clusters = true;
  } else if (rest == "cluster-ar" && !modified) {
    m.method = Method::ClusterAR;
  } else if (rest == "clmi-ar" && !modified) {
    m.method = Method::ClmiAR;
  } else {
    throw Error(ErrorCode::InvalidArgument, "unknown method '" + name + "'");
  }
  return m;
}

std::string method_name(const MethodConfig& m) {
  std::string s;
  switch (m.method) {
    case Method::ClusterAR: return "cluster-ar";
    case Method::ClmiAR: return "clmi-ar";
    case Method::CljAR: s = m.ignore_clusters ? "jk-ar" : "clj-ar"; break;
    case Method::CljScore: s = m.ignore_clusters ? "jk-score" : "clj-score"; break;
  }
  if (m.kernel == KernelChoice::SymmetricClusterJackknife) s += "-sym";
  if (m.kernel == KernelChoice::ManyControls) s += "-mc";
  if (m.estimator == VarianceEstimator::CrossFit) s += "-cf";
  return s;
}

double critical_value(std::size_t k, double alpha) {
  if (k < 1) throw Error(ErrorCode::InvalidArgument, "critical_value needs k >= 1");
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "alpha must lie in (0, 1)");
  }
  const double dk = static_cast<double>(k);
  return (chi2_quantile(1.0 - alpha, dk) - dk) / std::sqrt(2.0 * dk);
}

namespace {

void check_alpha(double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "alpha must lie in (0, 1)");
  }
}

TestOutcome base_outcome(const ClusteredDesign& d, const MethodConfig& m, const Vector& beta,
                         double alpha) {
  TestOutcome o;
  o.method = m;
  o.beta = beta;
  o.alpha = alpha;
  o.k = d.k();
  o.G = d.G();
  o.n = d.n();
  o.p = d.p();
  return o;
}

}  // namespace

// One-sided test of t against the shifted and scaled chi2_k critical value.
void decide_shifted_chi2(TestOutcome& o, double t) {
  const double dk = static_cast<double>(o.k);
  o.statistic = t;
  o.threshold = critical_value(o.k, o.alpha);
  const double x = dk + std::sqrt(2.0 * dk) * t;
  o.p_value = x <= 0.0 ? 1.0 : chi2_sf(x, dk);
  o.p_value_normal = normal_sf(t);
  o.reject = t > o.threshold;
}

namespace {

void decide_ar(TestOutcome& o, double ar, const VarianceBundle& b) {
  o.variance = b.v_ar;
  o.warnings.insert(o.warnings.end(), b.warnings.begin(), b.warnings.end());
  if (!(b.v_ar > 0.0)) {
    // Zero (or clamped) variance: report a non-rejection.
    if (!b.clamped) o.warnings.push_back("V^AR is zero; treated as a non-rejection");
    o.threshold = critical_value(o.k, o.alpha);
    o.statistic = 0.0;
    o.p_value = 1.0;
    o.p_value_normal = 0.5;
    o.reject = false;
    return;
  }
  decide_shifted_chi2(o, ar / std::sqrt(b.v_ar));
}

}  // namespace

void decide_score(TestOutcome& o, const Vector& s, const Matrix& v_s) {
  const auto p = s.size();
  if (p == 1) {
    const double v = v_s(0, 0);
    if (!(v > 0.0)) {
      throw Error(ErrorCode::SingularScoreVariance,
                  "score variance " + std::to_string(v) + " is not positive");
    }
    o.variance = v;
    o.statistic = s(0) / std::sqrt(v);
    o.threshold = normal_quantile(1.0 - o.alpha / 2.0);
    o.p_value = std::min(1.0, 2.0 * normal_sf(std::abs(o.statistic)));
    o.reject = std::abs(o.statistic) > o.threshold;
    return;
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(v_s);
  const Vector lam = es.eigenvalues();
  if (!(lam.minCoeff() > 1e-12 * std::max(lam.maxCoeff(), 0.0)) || !(lam.maxCoeff() > 0.0)) {
    throw Error(ErrorCode::SingularScoreVariance, "score variance matrix is not positive definite");
  }
  const Vector u = es.eigenvectors().transpose() * s;
  o.statistic = u.cwiseProduct(lam.cwiseInverse()).dot(u);
  o.variance = v_s.trace();
  const double dp = static_cast<double>(p);
  o.threshold = chi2_quantile(1.0 - o.alpha, dp);
  o.p_value = chi2_sf(o.statistic, dp);
  o.reject = o.statistic > o.threshold;
}

TestOutcome cluster_ar_test(const ClusteredDesign& d, const Vector& beta, double alpha) {
  check_alpha(alpha);
  MethodConfig m;
  m.method = Method::ClusterAR;
  TestOutcome o = base_outcome(d, m, beta, alpha);
  const Matrix M = cluster_moments(d, beta);
  const Vector mbar = M.colwise().sum().transpose();
  // Weight sum_g m_g m_g' (the n scalings cancel).
  Eigen::LDLT<Matrix> ldlt(M.transpose() * M);
  const Vector D = ldlt.vectorD().cwiseAbs();
  const double tol = static_cast<double>(std::max(d.G(), d.k())) *
                     std::numeric_limits<double>::epsilon() * D.maxCoeff();
  if (ldlt.info() != Eigen::Success || !(D.maxCoeff() > 0.0) || D.minCoeff() <= tol) {
    throw Error(ErrorCode::SingularMomentCovariance,
                "cluster-robust moment covariance is singular at this beta");
  }
  const double dk = static_cast<double>(d.k());
  o.statistic = mbar.dot(ldlt.solve(mbar));
  o.threshold = chi2_quantile(1.0 - alpha, dk);
  o.p_value = chi2_sf(o.statistic, dk);
  o.reject = o.statistic > o.threshold;
  return o;
}

TestOutcome clj_test(const ClusteredDesign& d, const Vector& beta, double alpha,
                     KernelChoice choice, VarianceEstimator estimator) {
  MethodConfig m;
  m.method = Method::CljAR;
  m.kernel = choice;
  m.estimator = estimator;
  return run_test(d, m, beta, alpha);
}

TestOutcome clj_score_test(const ClusteredDesign& d, const Vector& beta, double alpha,
                           KernelChoice choice, VarianceEstimator estimator) {
  MethodConfig m;
  m.method = Method::CljScore;
  m.kernel = choice;
  m.estimator = estimator;
  return run_test(d, m, beta, alpha);
}

TestOutcome clmi_test(const ClusteredDesign& d, const Vector& beta, double alpha) {
  check_alpha(alpha);
  MethodConfig m;
  m.method = Method::ClmiAR;
  TestOutcome o = base_outcome(d, m, beta, alpha);
  const ClmiStatistic s = clmi_statistic(d, beta);
  o.variance = s.variance;
  if (s.max_diag >= 1.0 - 1e-8) {
    o.warnings.push_back("a cluster has moment leverage 1");
  }
  decide_shifted_chi2(o, s.stat);
  return o;
}

struct PreparedTest::State {
  ClusteredDesign d;
  MethodConfig m;
  double alpha = 0.05;
  std::optional<ClusterPairForms> forms;
  std::optional<Kernel> kernel;
};

PreparedTest::PreparedTest(const ClusteredDesign& d, const MethodConfig& m, double alpha)
    : s_(std::make_unique<State>()) {
  check_alpha(alpha);
  s_->d = m.ignore_clusters ? with_singleton_clusters(d) : d;
  s_->m = m;
  s_->alpha = alpha;
  check_design(s_->d);
  if (m.method == Method::CljAR || m.method == Method::CljScore) {
    if (m.estimator == VarianceEstimator::Plain) {
      s_->forms = ClusterPairForms::build(s_->d, m.kernel);
    } else {
      s_->kernel = build_kernel(s_->d, m.kernel);
    }
  }
}

PreparedTest::~PreparedTest() = default;
PreparedTest::PreparedTest(PreparedTest&&) noexcept = default;

TestOutcome PreparedTest::operator()(const Vector& beta) const {
  const ClusteredDesign& d = s_->d;
  const MethodConfig& m = s_->m;
  switch (m.method) {
    case Method::ClusterAR: return cluster_ar_test(d, beta, s_->alpha);
    case Method::ClmiAR: return clmi_test(d, beta, s_->alpha);
    case Method::CljAR:
    case Method::CljScore: break;
  }
  if (static_cast<std::size_t>(beta.size()) != d.p()) {
    throw Error(ErrorCode::DimensionMismatch, "beta length does not match p");
  }
  TestOutcome o = base_outcome(d, m, beta, s_->alpha);
  double ar = 0.0;
  Vector score;
  VarianceBundle b;
  if (s_->forms) {
    JackknifeStatistics st = plain_statistics(s_->forms->at(beta), d.n(), d.k());
    ar = st.ar;
    score = std::move(st.score);
    b = std::move(st.bundle);
  } else {
    ar = ar_statistic(d, *s_->kernel, beta);
    score = score_statistic(d, *s_->kernel, beta);
    b = variance_bundle(d, *s_->kernel, beta, m.estimator);
  }
  if (m.method == Method::CljAR) {
    decide_ar(o, ar, b);
  } else {
    decide_score(o, score, b.v_s);
  }
  return o;
}

TestOutcome run_test(const ClusteredDesign& d, const MethodConfig& m, const Vector& beta,
                     double alpha) {
  return PreparedTest(d, m, alpha)(beta);
}

std::size_t Grid::size() const {
  return static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
}

double Grid::at(std::size_t i) const { return lo + static_cast<double>(i) * step; }

namespace {

GridPoint evaluate_point(const PreparedTest& test, double beta) {
  GridPoint pt;
  pt.beta = beta;
  try {
    const TestOutcome o = test(Vector::Constant(1, beta));
    pt.reject = o.reject;
    pt.statistic = o.statistic;
    pt.p_value = o.p_value;
    for (const auto& w : o.warnings) {
      if (!pt.warning.empty()) pt.warning += "; ";
      pt.warning += w;
    }
  } catch (const std::exception& e) {
    pt.reject = true;
    pt.statistic = 0.0;
    pt.p_value = 0.0;
    pt.warning = e.what();
  }
  return pt;
}

// Shrinks [accepted, rejected] (in either order) to width <= tol and returns
// the accepted end.
double bisect_boundary(const PreparedTest& test, double accepted, double rejected) {
  while (std::abs(rejected - accepted) > kRefineTolerance) {
    const double mid = 0.5 * (accepted + rejected);
    if (evaluate_point(test, mid).reject) {
      rejected = mid;
    } else {
      accepted = mid;
    }
  }
  return accepted;
}

}  // namespace

ConfidenceSet invert_confidence_set(const ClusteredDesign& d, const MethodConfig& m, double alpha,
                                    const Grid& grid, bool refine, std::size_t threads) {
  if (d.p() != 1) {
    throw Error(ErrorCode::UnsupportedDimension, "confidence sets need a single regressor");
  }
  if (!(grid.lo < grid.hi) || !(grid.step > 0.0) || !std::isfinite(grid.lo) ||
      !std::isfinite(grid.hi)) {
    throw Error(ErrorCode::InvalidArgument, "grid needs lo < hi and step > 0");
  }
  const PreparedTest test(d, m, alpha);

  ConfidenceSet cs;
  cs.alpha = alpha;
  cs.method = m;
  cs.grid = grid;
  cs.refined = refine;
  const std::size_t N = grid.size();
  cs.points.resize(N);
  parallel_for(N, threads, [&](std::size_t i) { cs.points[i] = evaluate_point(test, grid.at(i)); });

  std::size_t flagged = 0;
  for (std::size_t i = 0; i < N;) {
    if (!cs.points[i].warning.empty()) ++flagged;
    if (cs.points[i].reject) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j + 1 < N && !cs.points[j + 1].reject) {
      ++j;
      if (!cs.points[j].warning.empty()) ++flagged;
    }
    Interval iv;
    iv.lo = cs.points[i].beta;
    iv.hi = cs.points[j].beta;
    iv.unbounded_lo = i == 0;
    iv.unbounded_hi = j + 1 == N;
    if (refine) {
      if (!iv.unbounded_lo) iv.lo = bisect_boundary(test, iv.lo, cs.points[i - 1].beta);
      if (!iv.unbounded_hi) iv.hi = bisect_boundary(test, iv.hi, cs.points[j + 1].beta);
    }
    cs.intervals.push_back(iv);
    i = j + 1;
  }

  if (cs.intervals.empty()) cs.warnings.push_back("empty confidence set");
  for (const auto& iv : cs.intervals) {
    if (iv.unbounded_lo || iv.unbounded_hi) {
      cs.warnings.push_back("unbounded at grid edge");
      break;
    }
  }
  if (flagged > 0) {
    cs.warnings.push_back(std::to_string(flagged) +
                          " grid points raised errors or warnings (see points)");
  }
  return cs;
}

}  // namespace clusteriv
