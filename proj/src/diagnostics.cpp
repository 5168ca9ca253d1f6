#include "clusteriv/diagnostics.hpp"

#include "clusteriv/error.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <limits>

namespace clusteriv {

const char* to_string(FirstStageFlavor f) {
  switch (f) {
    case FirstStageFlavor::Homoskedastic: return "homoskedastic";
    case FirstStageFlavor::Robust: return "robust";
    case FirstStageFlavor::Effective: return "effective";
  }
  return "unknown";
}

FirstStageFlavor parse_first_stage_flavor(const std::string& s) {
  if (s == "homoskedastic") return FirstStageFlavor::Homoskedastic;
  if (s == "robust") return FirstStageFlavor::Robust;
  if (s == "effective") return FirstStageFlavor::Effective;
  throw Error(ErrorCode::InvalidArgument, "unknown first-stage flavor '" + s + "'");
}

namespace {

struct FirstStage {
  Matrix Q;    // orthonormal basis of Z
  Matrix eta;  // M_Z X
  Matrix QtX;  // Q'X, so X'P_Z X = QtX'QtX
};

FirstStage first_stage(const ClusteredDesign& d) {
  check_design(d);
  if (d.controls == ControlsState::Pending && d.l() > 0) {
    throw Error(ErrorCode::InvalidArgument,
                "first-stage diagnostics need controls partialled out first");
  }
  FirstStage fs;
  fs.Q = orthonormal_basis(d.Z, "Z");
  fs.QtX = fs.Q.transpose() * d.X;
  fs.eta = d.X - fs.Q * fs.QtX;
  return fs;
}

Matrix w2_from(const ClusteredDesign& d, const Matrix& eta) {
  const auto k = static_cast<Eigen::Index>(d.k());
  Matrix W2 = Matrix::Zero(k, k);
  for (std::size_t g = 0; g < d.G(); ++g) {
    const auto s = static_cast<Eigen::Index>(d.blocks[g].start);
    const auto l = static_cast<Eigen::Index>(d.blocks[g].length);
    // Z_g' eta_g is k x p; p = 1 for the flavors that use W2.
    const Matrix m = d.Z.middleRows(s, l).transpose() * eta.middleRows(s, l);
    W2.noalias() += m * m.transpose();
  }
  return W2 / static_cast<double>(d.n());
}

}  // namespace

Matrix first_stage_w2(const ClusteredDesign& d) {
  const FirstStage fs = first_stage(d);
  if (d.p() != 1) {
    throw Error(ErrorCode::UnsupportedDimension, "W2 is defined for a single regressor");
  }
  return w2_from(d, fs.eta);
}

FirstStageReport first_stage_f(const ClusteredDesign& d, FirstStageFlavor flavor) {
  const FirstStage fs = first_stage(d);
  FirstStageReport r;
  r.flavor = flavor;
  r.k = d.k();
  r.p = d.p();
  r.G = d.G();
  r.n = d.n();
  const double dn = static_cast<double>(d.n());
  const double dk = static_cast<double>(d.k());

  if (flavor == FirstStageFlavor::Homoskedastic) {
    if (d.n() <= d.k()) {
      throw Error(ErrorCode::InvalidArgument, "homoskedastic F needs n > k");
    }
    const Matrix S = fs.eta.transpose() * fs.eta / (dn - dk);
    const Matrix XPX = fs.QtX.transpose() * fs.QtX;
    Eigen::SelfAdjointEigenSolver<Matrix> es(S);
    const Vector lam = es.eigenvalues();
    const double scale = std::max(XPX.diagonal().maxCoeff(), (d.X.transpose() * d.X).trace() / dn);
    const double floor = 1e-12 * std::max(scale, std::numeric_limits<double>::min());
    if (lam.minCoeff() <= floor) {
      r.infinite = true;
      r.value = std::numeric_limits<double>::infinity();
      return r;
    }
    const Matrix Sih = es.eigenvectors() * lam.cwiseSqrt().cwiseInverse().asDiagonal() *
                       es.eigenvectors().transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> fe(Sih * XPX * Sih, Eigen::EigenvaluesOnly);
    r.value = std::max(0.0, fe.eigenvalues().minCoeff());
    return r;
  }

  if (d.p() != 1) {
    throw Error(ErrorCode::UnsupportedDimension,
                std::string(to_string(flavor)) + " F is defined for a single regressor");
  }
  const Matrix W2 = w2_from(d, fs.eta);
  // Roundoff residuals pass a relative rank check, so also compare eta to x.
  const bool vanishing = fs.eta.squaredNorm() <= 1e-24 * d.X.squaredNorm();
  if (flavor == FirstStageFlavor::Robust) {
    if (vanishing) {
      throw Error(ErrorCode::SingularW2, "first-stage residuals vanish");
    }
    Eigen::LDLT<Matrix> ldlt(W2);
    const Vector D = ldlt.vectorD().cwiseAbs();
    if (ldlt.info() != Eigen::Success || !(D.maxCoeff() > 0.0) ||
        D.minCoeff() <= rank_threshold(d.G(), d.k()) * D.maxCoeff()) {
      throw Error(ErrorCode::SingularW2, "cluster-robust first-stage covariance is singular");
    }
    const Vector zx = d.Z.transpose() * d.X.col(0);
    r.value = std::max(0.0, zx.dot(ldlt.solve(zx)) / (dn * dk));
    return r;
  }

  // Effective: tr(W2 (Z'Z/n)^{-1}).
  const Matrix ZtZ = d.Z.transpose() * d.Z / dn;
  const double denom = ZtZ.ldlt().solve(W2).trace();
  const double num = fs.QtX.squaredNorm();
  if (vanishing || !(denom > 1e-300)) {
    r.infinite = true;
    r.value = std::numeric_limits<double>::infinity();
    return r;
  }
  r.value = num / denom;
  return r;
}

}  // namespace clusteriv
