#pragma once

// Cluster many-instrument AR: the moments m_g = Z_[g]' eps_[g] summed per
// cluster and the projection onto their span weighted by Z' B_{ee'} Z.

#include "clusteriv/data.hpp"

#include <cstddef>

namespace clusteriv {

// G x k matrix whose row g is m_g(beta)'.
Matrix cluster_moments(const ClusteredDesign& d, const Vector& beta);

struct ClusterMomentProjection {
  Matrix P;  // G x G, P = M (M'M)^{-1} M'
  std::size_t k = 0;
  double max_diag = 0.0;  // values near 1 make the statistic degenerate
};

// Throws TooManyInstruments when k >= G and SingularWeight when M'M is
// (numerically) singular, e.g. because too many clusters have zero residuals.
ClusterMomentProjection cluster_moment_projection(const ClusteredDesign& d, const Vector& beta);

struct ClmiStatistic {
  double stat = 0.0;      // iota' P_dot iota / sqrt(k V)
  double variance = 0.0;  // V = (2/k) sum_{g != h} P_gh^2
  double max_diag = 0.0;
};

ClmiStatistic clmi_statistic(const ClusterMomentProjection& proj);
ClmiStatistic clmi_statistic(const ClusteredDesign& d, const Vector& beta);

// Below this the CLMI variance is treated as zero.
inline constexpr double kDegenerateVariance = 1e-14;

}  // namespace clusteriv
