#pragma once

// Tests of H0: beta0 = beta and confidence sets by test inversion.

#include "clusteriv/data.hpp"
#include "clusteriv/jackknife.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace clusteriv {

enum class Method { ClusterAR, CljAR, CljScore, ClmiAR };
const char* to_string(Method m);

struct MethodConfig {
  Method method = Method::CljAR;
  KernelChoice kernel = KernelChoice::PlainClusterJackknife;
  VarianceEstimator estimator = VarianceEstimator::Plain;
  // Treat every observation as its own cluster (the independent-data jackknife).
  bool ignore_clusters = false;
};

// Short names used on the command line and in simulation tables:
//   cluster-ar, clj-ar, clj-score, clmi-ar, jk-ar, jk-score,
// with optional suffixes -sym, -mc (kernel) and -cf (cross-fit).
MethodConfig parse_method(const std::string& name);
std::string method_name(const MethodConfig& m);

struct TestOutcome {
  MethodConfig method;
  Vector beta;
  double statistic = 0.0;
  double threshold = 0.0;
  double p_value = 1.0;
  // Normal-tail p-value of the studentised statistic (CLJ-AR, CLMI-AR only).
  std::optional<double> p_value_normal;
  bool reject = false;
  double alpha = 0.05;
  std::size_t k = 0, G = 0, n = 0, p = 0;
  double variance = 0.0;  // the variance used to studentise, if any
  std::vector<std::string> warnings;
};

// (chi2_{k,1-alpha} - k) / sqrt(2k)
double critical_value(std::size_t k, double alpha);

// Decision rules shared by the tests; o.k and o.alpha must be set. Rejection
// is strict: a statistic equal to the threshold is not rejected.
void decide_shifted_chi2(TestOutcome& o, double t);
void decide_score(TestOutcome& o, const Vector& s, const Matrix& v_s);

// Cluster-robust AR: (Z'e)' (sum_g Z_g'e_g e_g'Z_g)^{-1} (Z'e) against chi2_k.
TestOutcome cluster_ar_test(const ClusteredDesign& d, const Vector& beta, double alpha);
TestOutcome clj_test(const ClusteredDesign& d, const Vector& beta, double alpha,
                     KernelChoice choice = KernelChoice::PlainClusterJackknife,
                     VarianceEstimator estimator = VarianceEstimator::Plain);
// p = 1: two-sided normal test of S / sqrt(V^S). p > 1: S' (V^S)^{-1} S against chi2_p.
TestOutcome clj_score_test(const ClusteredDesign& d, const Vector& beta, double alpha,
                           KernelChoice choice = KernelChoice::PlainClusterJackknife,
                           VarianceEstimator estimator = VarianceEstimator::Plain);
TestOutcome clmi_test(const ClusteredDesign& d, const Vector& beta, double alpha);

TestOutcome run_test(const ClusteredDesign& d, const MethodConfig& m, const Vector& beta,
                     double alpha);

// A test with its beta-independent work done once (kernel, pair forms), for
// evaluation at many beta. Const evaluation is thread-safe.
class PreparedTest {
 public:
  PreparedTest(const ClusteredDesign& d, const MethodConfig& m, double alpha);
  ~PreparedTest();
  PreparedTest(PreparedTest&&) noexcept;
  TestOutcome operator()(const Vector& beta) const;

 private:
  struct State;
  std::unique_ptr<State> s_;
};

struct Grid {
  double lo = -2.0;
  double hi = 2.0;
  double step = 0.005;
  std::size_t size() const;
  double at(std::size_t i) const;
};

struct GridPoint {
  double beta = 0.0;
  bool reject = true;
  double statistic = 0.0;
  double p_value = 0.0;
  std::string warning;  // empty unless the point errored or was clamped
};

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  bool unbounded_lo = false;  // accepted at the lower grid edge
  bool unbounded_hi = false;
};

struct ConfidenceSet {
  double alpha = 0.05;
  MethodConfig method;
  std::vector<Interval> intervals;
  Grid grid;
  bool refined = false;
  std::vector<GridPoint> points;
  std::vector<std::string> warnings;
};

// Width to which refined endpoints are bisected.
inline constexpr double kRefineTolerance = 1e-4;

// Scalar beta only. Grid points whose test throws count as rejected and carry
// the error as a warning.
ConfidenceSet invert_confidence_set(const ClusteredDesign& d, const MethodConfig& m, double alpha,
                                    const Grid& grid = {}, bool refine = false,
                                    std::size_t threads = 1);

}  // namespace clusteriv
