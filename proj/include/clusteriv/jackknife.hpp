#pragma once

// Cluster jackknife AR and score statistics and their variance estimators.
//
// Every statistic is a bilinear form u' K v in a kernel K whose diagonal
// cluster blocks are zero, which is what centres it under the null. Three
// kernels are available:
//   plain      P_Z with its diagonal blocks removed
//   symmetric  (Pt + Pt')/2, Pt the leave-one-cluster-out fitting matrix
//   many-controls  P_{M_W Z} - M_W H M_W for pending controls W
//
// The variance estimators only ever need the G x G matrices of cluster-pair
// products u_[g]' K_[g,h] v_[h]. ClusterPairForms stores those for u, v in
// {y, x_1..x_p}, so re-evaluating at a new beta costs O(p^2 G^2) rather than
// O(n^2).

#include "clusteriv/blocks.hpp"
#include "clusteriv/data.hpp"

#include <optional>
#include <string>
#include <vector>

namespace clusteriv {

enum class KernelChoice { PlainClusterJackknife, SymmetricClusterJackknife, ManyControls };
enum class VarianceEstimator { Plain, CrossFit };

const char* to_string(KernelChoice c);
const char* to_string(VarianceEstimator e);

struct Kernel {
  Matrix K;  // symmetric, diagonal cluster blocks exactly zero
  KernelChoice choice = KernelChoice::PlainClusterJackknife;
  double pre_zero_residual = 0.0;  // |block diagonal| removed by enforcement
};

// Plain and symmetric kernels refuse designs whose controls are still
// pending; many-controls needs them (l = 0 reduces it to plain).
Kernel build_kernel(const ClusteredDesign& d, KernelChoice choice);
Matrix kernel_matrix(const ClusteredDesign& d, KernelChoice choice);

Vector residuals(const ClusteredDesign& d, const Vector& beta);

// eps' K eps / sqrt(k)
double ar_statistic(const ClusteredDesign& d, const Vector& beta, KernelChoice choice);
double ar_statistic(const ClusteredDesign& d, const Kernel& kernel, const Vector& beta);
// X' K eps / sqrt(n)
Vector score_statistic(const ClusteredDesign& d, const Vector& beta, KernelChoice choice);
Vector score_statistic(const ClusteredDesign& d, const Kernel& kernel, const Vector& beta);

struct VarianceBundle {
  double v_ar = 0.0;  // after clamping at zero
  Matrix v_s;         // p x p
  Vector c;           // p
  VarianceEstimator estimator = VarianceEstimator::Plain;
  double v_ar_raw = 0.0;
  bool clamped = false;
  std::vector<std::string> warnings;
};

// Below this a negative plain V^AR is numerical breakdown, not noise.
inline constexpr double kNegativeVarianceTolerance = 1e-12;

VarianceBundle variance_bundle(const ClusteredDesign& d, const Vector& beta, KernelChoice choice,
                               VarianceEstimator estimator);
VarianceBundle variance_bundle(const ClusteredDesign& d, const Kernel& kernel,
                               const Vector& beta, VarianceEstimator estimator);

// Cluster-pair products at one beta. With eps = eps(beta):
//   A(g,h)    = eps_g' K_gh eps_h
//   D[i](g,h) = x_i,g' K_gh eps_h
//   E[i](g,h) = eps_g' K_gh x_i,h
struct ClusterPairProducts {
  Matrix A;
  std::vector<Matrix> D;
  std::vector<Matrix> E;
};

ClusterPairProducts pair_products(const Matrix& K, const ClusterBlocks& blocks,
                                  const Vector& eps, const Matrix& X);

// Cluster-pair products of {y, x_1..x_p} with themselves; evaluates
// ClusterPairProducts at any beta by linearity of eps(beta) = y - X beta.
class ClusterPairForms {
 public:
  // Plain kernels with G well below n skip the n x n kernel and work from an
  // orthonormal basis of Z; the other choices go through build_kernel.
  static ClusterPairForms build(const ClusteredDesign& d, KernelChoice choice);
  static ClusterPairForms from_kernel(const ClusteredDesign& d, const Kernel& kernel);

  ClusterPairProducts at(const Vector& beta) const;
  std::size_t p() const { return p_; }
  std::size_t G() const { return G_; }
  // B_a' K B_b for a, b in {0 = y, 1..p = x_1..x_p}
  const Matrix& form(std::size_t a, std::size_t b) const { return forms_[a * (p_ + 1) + b]; }

 private:
  std::size_t p_ = 0, G_ = 0;
  std::vector<Matrix> forms_;
};

struct JackknifeStatistics {
  double ar = 0.0;  // eps' K eps / sqrt(k)
  Vector score;     // X' K eps / sqrt(n)
  VarianceBundle bundle;
};

// Statistics and the plain (non cross-fit) variance estimators from the pair
// products; n and k are the sample size and instrument count.
JackknifeStatistics plain_statistics(const ClusterPairProducts& pp, std::size_t n, std::size_t k);

// Ground-truth conditional variances for a known error structure.
struct AnalyticVarianceInputs {
  std::vector<Matrix> sigma;               // Sigma_g = E(eps_g eps_g' | Z)
  std::vector<std::vector<Matrix>> xi;     // xi[g][i] = E(eta_(i),g eps_g' | Z)
  std::vector<std::vector<Matrix>> omega;  // omega[g][i*p+j] = E(eta_(i),g eta_(j),g' | Z)
  Matrix z_pi;                             // Z Pi (n x p)
  std::size_t n = 0;
};

struct AnalyticVariances {
  double v_ar = 0.0;
  std::optional<Vector> c;    // present when xi is supplied
  std::optional<Matrix> v_s;  // present when xi, omega and z_pi are supplied
};

AnalyticVariances analytic_variances(const AnalyticVarianceInputs& in, const Matrix& K,
                                     const ClusterBlocks& blocks, std::size_t k);

// V^{-1/2} (AR, S')' with V the (p+1) x (p+1) bundle matrix, via a symmetric
// inverse square root. Throws SingularJointVariance when AR and the score are
// (numerically) perfectly correlated.
Vector joint_standardize(double ar, const Vector& score, const VarianceBundle& bundle);
Vector joint_standardized(const ClusteredDesign& d, const Vector& beta, KernelChoice choice,
                          VarianceEstimator estimator);

// Inputs to a conditional linear combination of the AR and score statistics
// (single regressor, plain kernel).
struct ClcEstimates {
  double phi1 = 0.0;
  double phi12 = 0.0;
  double phi13 = 0.0;
  double psi = 0.0;
  double upsilon = 0.0;
};
ClcEstimates clc_estimators(const ClusteredDesign& d, const Vector& beta);

}  // namespace clusteriv
