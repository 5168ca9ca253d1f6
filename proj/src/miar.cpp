#include "clusteriv/miar.hpp"

#include "clusteriv/error.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <limits>

namespace clusteriv {

Matrix cluster_moments(const ClusteredDesign& d, const Vector& beta) {
  check_design(d);
  if (static_cast<std::size_t>(beta.size()) != d.p()) {
    throw Error(ErrorCode::DimensionMismatch, "beta length does not match p");
  }
  if (d.controls == ControlsState::Pending && d.l() > 0) {
    throw Error(ErrorCode::InvalidArgument,
                "cluster moment statistics need controls partialled out first");
  }
  const Vector e = d.y - d.X * beta;
  return cluster_weighted_sums(e, d.Z, d.blocks);
}

ClusterMomentProjection cluster_moment_projection(const ClusteredDesign& d, const Vector& beta) {
  if (d.k() >= d.G()) throw TooManyInstrumentsError(d.k(), d.G());
  const Matrix M = cluster_moments(d, beta);
  // Each m_g m_g' enters M'M unchanged under m_g -> -m_g, so the
  // factorisation and P's diagonal are exactly sign-flip invariant.
  const Matrix W = M.transpose() * M;
  Eigen::LDLT<Matrix> ldlt(W);
  const Vector D = ldlt.vectorD().cwiseAbs();
  const double tol = static_cast<double>(std::max(d.G(), d.k())) *
                     std::numeric_limits<double>::epsilon() * D.maxCoeff();
  if (ldlt.info() != Eigen::Success || !(D.maxCoeff() > 0.0) || D.minCoeff() <= tol) {
    throw Error(ErrorCode::SingularWeight, "Z' B_ee' Z is singular at this beta");
  }
  ClusterMomentProjection out;
  out.k = d.k();
  out.P = M * ldlt.solve(M.transpose());
  out.P = 0.5 * (out.P + out.P.transpose()).eval();
  out.max_diag = out.P.diagonal().maxCoeff();
  return out;
}

ClmiStatistic clmi_statistic(const ClusterMomentProjection& proj) {
  const double k = static_cast<double>(proj.k);
  const Matrix& P = proj.P;
  ClmiStatistic s;
  s.max_diag = proj.max_diag;
  s.variance = 2.0 / k * (P.squaredNorm() - P.diagonal().squaredNorm());
  if (!(s.variance > kDegenerateVariance)) {
    throw Error(ErrorCode::DegenerateVariance,
                "CLMI variance " + std::to_string(s.variance) + " is numerically zero");
  }
  s.stat = (P.sum() - P.trace()) / std::sqrt(k * s.variance);
  return s;
}

ClmiStatistic clmi_statistic(const ClusteredDesign& d, const Vector& beta) {
  return clmi_statistic(cluster_moment_projection(d, beta));
}

}  // namespace clusteriv
