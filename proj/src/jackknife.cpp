#include "clusteriv/jackknife.hpp"

#include "clusteriv/error.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>

namespace clusteriv {

const char* to_string(KernelChoice c) {
  switch (c) {
    case KernelChoice::PlainClusterJackknife: return "plain";
    case KernelChoice::SymmetricClusterJackknife: return "symmetric";
    case KernelChoice::ManyControls: return "many-controls";
  }
  return "unknown";
}

const char* to_string(VarianceEstimator e) {
  switch (e) {
    case VarianceEstimator::Plain: return "plain";
    case VarianceEstimator::CrossFit: return "cross-fit";
  }
  return "unknown";
}

namespace {

using Index = Eigen::Index;

Index idx(std::size_t i) { return static_cast<Index>(i); }

void require_beta(const ClusteredDesign& d, const Vector& beta) {
  if (static_cast<std::size_t>(beta.size()) != d.p()) {
    throw Error(ErrorCode::DimensionMismatch, "beta has " + std::to_string(beta.size()) +
                                                  " entries, design has p = " +
                                                  std::to_string(d.p()));
  }
}

void require_no_pending_controls(const ClusteredDesign& d, const char* what) {
  if (d.controls == ControlsState::Pending && d.l() > 0) {
    throw Error(ErrorCode::InvalidArgument,
                std::string(what) +
                    " needs controls partialled out first (or the many-controls kernel)");
  }
}

// K B_v: column h is K[:, [h]] v_[h].
Matrix kernel_times_blockified(const Matrix& K, const ClusterBlocks& blocks, const Vector& v) {
  Matrix out(K.rows(), idx(blocks.G()));
  for (std::size_t h = 0; h < blocks.G(); ++h) {
    const auto s = idx(blocks[h].start);
    const auto l = idx(blocks[h].length);
    out.col(idx(h)).noalias() = K.middleCols(s, l) * v.segment(s, l);
  }
  return out;
}

// sum_{g != h} X(g,h) Y(g,h)
double offdiag_dot(const Matrix& X, const Matrix& Y) {
  return (X.cwiseProduct(Y)).sum() - X.diagonal().dot(Y.diagonal());
}

void finalize_v_ar(VarianceBundle& b) {
  b.v_ar = b.v_ar_raw;
  if (b.v_ar_raw >= 0.0) return;
  if (b.estimator == VarianceEstimator::Plain && b.v_ar_raw < -kNegativeVarianceTolerance) {
    throw Error(ErrorCode::NegativeVariance,
                "plain V^AR estimate " + std::to_string(b.v_ar_raw) + " is negative");
  }
  b.v_ar = 0.0;
  b.clamped = true;
  b.warnings.push_back("V^AR estimate " + std::to_string(b.v_ar_raw) + " clamped to 0");
}

}  // namespace

Kernel build_kernel(const ClusteredDesign& d, KernelChoice choice) {
  check_design(d);
  Kernel out;
  out.choice = choice;
  switch (choice) {
    case KernelChoice::PlainClusterJackknife: {
      require_no_pending_controls(d, "plain cluster jackknife kernel");
      out.K = projection_from_basis(orthonormal_basis(d.Z, "Z"));
      clear_block_diagonal(out.K, d.blocks);
      break;
    }
    case KernelChoice::SymmetricClusterJackknife: {
      require_no_pending_controls(d, "symmetric cluster jackknife kernel");
      const Matrix Pt = symmetric_jackknife_matrix(d.Z, d.blocks, &out.pre_zero_residual);
      out.K = 0.5 * (Pt + Pt.transpose());
      break;
    }
    case KernelChoice::ManyControls: {
      auto mc = many_controls_kernel(d.Z, d.W, d.blocks);
      out.K = std::move(mc.K);
      out.pre_zero_residual = mc.pre_zero_residual;
      break;
    }
  }
  return out;
}

Matrix kernel_matrix(const ClusteredDesign& d, KernelChoice choice) {
  return build_kernel(d, choice).K;
}

Vector residuals(const ClusteredDesign& d, const Vector& beta) {
  require_beta(d, beta);
  return d.y - d.X * beta;
}

double ar_statistic(const ClusteredDesign& d, const Kernel& kernel, const Vector& beta) {
  const Vector e = residuals(d, beta);
  return e.dot(kernel.K * e) / std::sqrt(static_cast<double>(d.k()));
}

double ar_statistic(const ClusteredDesign& d, const Vector& beta, KernelChoice choice) {
  return ar_statistic(d, build_kernel(d, choice), beta);
}

Vector score_statistic(const ClusteredDesign& d, const Kernel& kernel, const Vector& beta) {
  const Vector e = residuals(d, beta);
  return d.X.transpose() * (kernel.K * e) / std::sqrt(static_cast<double>(d.n()));
}

Vector score_statistic(const ClusteredDesign& d, const Vector& beta, KernelChoice choice) {
  return score_statistic(d, build_kernel(d, choice), beta);
}

ClusterPairProducts pair_products(const Matrix& K, const ClusterBlocks& blocks,
                                  const Vector& eps, const Matrix& X) {
  const Matrix KBe = kernel_times_blockified(K, blocks, eps);
  ClusterPairProducts pp;
  pp.A = cluster_weighted_sums(eps, KBe, blocks);
  for (Index i = 0; i < X.cols(); ++i) {
    const Vector xi = X.col(i);
    pp.D.push_back(cluster_weighted_sums(xi, KBe, blocks));
    pp.E.push_back(cluster_weighted_sums(eps, kernel_times_blockified(K, blocks, xi), blocks));
  }
  return pp;
}

ClusterPairForms ClusterPairForms::from_kernel(const ClusteredDesign& d, const Kernel& kernel) {
  ClusterPairForms f;
  f.p_ = d.p();
  f.G_ = d.G();
  const std::size_t m = f.p_ + 1;
  std::vector<Vector> cols;
  cols.push_back(d.y);
  for (Index i = 0; i < d.X.cols(); ++i) cols.push_back(d.X.col(i));
  std::vector<Matrix> KB;
  for (const auto& v : cols) KB.push_back(kernel_times_blockified(kernel.K, d.blocks, v));
  f.forms_.resize(m * m);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) {
      f.forms_[a * m + b] = cluster_weighted_sums(cols[a], KB[b], d.blocks);
    }
  }
  return f;
}

ClusterPairForms ClusterPairForms::build(const ClusteredDesign& d, KernelChoice choice) {
  check_design(d);
  const bool low_rank = choice == KernelChoice::PlainClusterJackknife &&
                        2 * d.G() * d.G() * (d.p() + 1) <= d.n() * d.n();
  if (!low_rank) return from_kernel(d, build_kernel(d, choice));

  require_no_pending_controls(d, "plain cluster jackknife kernel");
  // K = QQ' - B_{QQ'}, so B_a' K B_b = R_a R_b' with the diagonal dropped,
  // where row g of R_a is a_g' Q_g.
  const Matrix Q = orthonormal_basis(d.Z, "Z");
  ClusterPairForms f;
  f.p_ = d.p();
  f.G_ = d.G();
  const std::size_t m = f.p_ + 1;
  std::vector<Matrix> R;
  R.push_back(cluster_weighted_sums(d.y, Q, d.blocks));
  for (Index i = 0; i < d.X.cols(); ++i) {
    R.push_back(cluster_weighted_sums(d.X.col(i), Q, d.blocks));
  }
  f.forms_.resize(m * m);
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) {
      Matrix F = R[a] * R[b].transpose();
      F.diagonal().setZero();
      f.forms_[a * m + b] = std::move(F);
    }
  }
  return f;
}

ClusterPairProducts ClusterPairForms::at(const Vector& beta) const {
  if (static_cast<std::size_t>(beta.size()) != p_) {
    throw Error(ErrorCode::DimensionMismatch, "beta length does not match p");
  }
  const std::size_t m = p_ + 1;
  Vector c(idx(m));
  c(0) = 1.0;
  c.tail(idx(p_)) = -beta;

  ClusterPairProducts pp;
  pp.A = Matrix::Zero(idx(G_), idx(G_));
  for (std::size_t a = 0; a < m; ++a) {
    for (std::size_t b = 0; b < m; ++b) {
      const double w = c(idx(a)) * c(idx(b));
      if (w != 0.0) pp.A.noalias() += w * form(a, b);
    }
  }
  for (std::size_t i = 0; i < p_; ++i) {
    Matrix D = Matrix::Zero(idx(G_), idx(G_));
    Matrix E = Matrix::Zero(idx(G_), idx(G_));
    for (std::size_t b = 0; b < m; ++b) {
      if (c(idx(b)) == 0.0) continue;
      D.noalias() += c(idx(b)) * form(i + 1, b);
      E.noalias() += c(idx(b)) * form(b, i + 1);
    }
    pp.D.push_back(std::move(D));
    pp.E.push_back(std::move(E));
  }
  return pp;
}

JackknifeStatistics plain_statistics(const ClusterPairProducts& pp, std::size_t n,
                                     std::size_t k) {
  const double dn = static_cast<double>(n);
  const double dk = static_cast<double>(k);
  const std::size_t p = pp.D.size();
  JackknifeStatistics st;
  st.ar = (pp.A.sum() - pp.A.trace()) / std::sqrt(dk);
  st.score.resize(idx(p));
  for (std::size_t i = 0; i < p; ++i) {
    st.score(idx(i)) = (pp.D[i].sum() - pp.D[i].trace()) / std::sqrt(dn);
  }

  auto& b = st.bundle;
  b.estimator = VarianceEstimator::Plain;
  b.v_ar_raw = 2.0 / dk * offdiag_dot(pp.A, pp.A.transpose());

  // Column sums of the off-diagonal part of D_i: (X_i' K B_eps)_h.
  std::vector<Vector> colsum;
  for (const auto& D : pp.D) colsum.push_back(D.colwise().sum().transpose() - D.diagonal());
  b.v_s.resize(idx(p), idx(p));
  b.c.resize(idx(p));
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = 0; j < p; ++j) {
      b.v_s(idx(i), idx(j)) =
          (colsum[i].dot(colsum[j]) + offdiag_dot(pp.D[i], pp.E[j])) / dn;
    }
    b.c(idx(i)) = 2.0 / std::sqrt(dn * dk) * offdiag_dot(pp.D[i], pp.A);
  }
  b.v_s = 0.5 * (b.v_s + b.v_s.transpose()).eval();
  finalize_v_ar(b);
  return st;
}

namespace {


// Leave-clusters-out fits of eps on Z restricted to the rows of the dropped
// clusters, from the Gram matrix downdated by the dropped blocks.
class CrossFitter {
 public:
  CrossFitter(const ClusteredDesign& d, const Vector& eps) : d_(d), eps_(eps) {
    gram_ = d.Z.transpose() * d.Z;
    zte_ = d.Z.transpose() * eps;
    const std::size_t G = d.G();
    gram_g_.reserve(G);
    zte_g_.reserve(G);
    for (std::size_t g = 0; g < G; ++g) {
      const auto Zg = d.Z.middleRows(idx(d.blocks[g].start), idx(d.blocks[g].length));
      gram_g_.push_back(Zg.transpose() * Zg);
      zte_g_.push_back(Zg.transpose() * eps.segment(idx(d.blocks[g].start),
                                                    idx(d.blocks[g].length)));
    }
  }

  // Coefficients of the regression of eps on Z without clusters g (and h).
  Vector coef(std::size_t g, std::optional<std::size_t> h) const {
    Matrix A = gram_ - gram_g_[g];
    Vector r = zte_ - zte_g_[g];
    if (h) {
      A -= gram_g_[*h];
      r -= zte_g_[*h];
    }
    Eigen::LDLT<Matrix> ldlt(A);
    const Vector D = ldlt.vectorD().cwiseAbs();
    if (ldlt.info() != Eigen::Success ||
        D.minCoeff() <= rank_threshold(d_.n(), d_.k()) * D.maxCoeff()) {
      std::vector<std::size_t> drop{g};
      if (h) drop.push_back(*h);
      throw RankDeficientAfterDropError(drop, "Z loses rank after dropping clusters");
    }
    return ldlt.solve(r);
  }

  // (eps - fitted)_[g] using coefficients from coef().
  Vector cleaned(std::size_t g, const Vector& b) const {
    const auto s = idx(d_.blocks[g].start);
    const auto l = idx(d_.blocks[g].length);
    return eps_.segment(s, l) - d_.Z.middleRows(s, l) * b;
  }

 private:
  const ClusteredDesign& d_;
  const Vector& eps_;
  Matrix gram_;
  Vector zte_;
  std::vector<Matrix> gram_g_;
  std::vector<Vector> zte_g_;
};

VarianceBundle cross_fit_bundle(const ClusteredDesign& d, const Kernel& kernel,
                                const Vector& eps) {
  const auto& blocks = d.blocks;
  const std::size_t G = d.G();
  const std::size_t p = d.p();
  const double dn = static_cast<double>(d.n());
  const double dk = static_cast<double>(d.k());

  const Matrix KBe = kernel_times_blockified(kernel.K, blocks, eps);
  std::vector<Matrix> KBx;
  for (std::size_t i = 0; i < p; ++i) {
    KBx.push_back(kernel_times_blockified(kernel.K, blocks, d.X.col(idx(i))));
  }
  const Matrix KX = kernel.K * d.X;
  const CrossFitter fitter(d, eps);

  const auto rows = [&](const Matrix& M, std::size_t g, std::size_t col) {
    return M.col(idx(col)).segment(idx(blocks[g].start), idx(blocks[g].length));
  };
  const auto xseg = [&](std::size_t i, std::size_t g) {
    return d.X.col(idx(i)).segment(idx(blocks[g].start), idx(blocks[g].length));
  };

  VarianceBundle b;
  b.estimator = VarianceEstimator::CrossFit;
  b.v_s = Matrix::Zero(idx(p), idx(p));
  b.c = Vector::Zero(idx(p));
  double v_ar = 0.0;

  // Triple sum over g != h != j: leave-h-out residuals on cluster h.
  for (std::size_t h = 0; h < G; ++h) {
    const auto s = idx(blocks[h].start);
    const auto l = idx(blocks[h].length);
    const Vector e_cf = fitter.cleaned(h, fitter.coef(h, std::nullopt));
    const Matrix KXh = KX.middleRows(s, l);
    const Vector left = KXh.transpose() * e_cf;
    const Vector right = KXh.transpose() * eps.segment(s, l);
    b.v_s.noalias() += left * right.transpose();
  }

  // Pair sums over ordered (g, h), g != h, with leave-(g,h)-out residuals.
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = g + 1; h < G; ++h) {
      const Vector coef = fitter.coef(g, h);
      const Vector cg = fitter.cleaned(g, coef);
      const Vector ch = fitter.cleaned(h, coef);
      const double a_gh = cg.dot(rows(KBe, g, h));  // c_g' K_gh eps_h
      const double a_hg = ch.dot(rows(KBe, h, g));  // c_h' K_hg eps_g
      v_ar += 2.0 * a_gh * a_hg;
      for (std::size_t i = 0; i < p; ++i) {
        const double d_gh = xseg(i, g).dot(rows(KBe, g, h));  // x_g' K_gh eps_h
        const double d_hg = xseg(i, h).dot(rows(KBe, h, g));
        // X_g' K_gh c_h = c_h' K_hg X_g
        b.c(idx(i)) += ch.dot(rows(KBx[i], h, g)) * a_gh + cg.dot(rows(KBx[i], g, h)) * a_hg;
        for (std::size_t j = 0; j < p; ++j) {
          b.v_s(idx(i), idx(j)) +=
              d_gh * cg.dot(rows(KBx[j], g, h)) + d_hg * ch.dot(rows(KBx[j], h, g));
        }
      }
    }
  }
  b.v_ar_raw = 2.0 / dk * v_ar;
  b.c *= 2.0 / std::sqrt(dn * dk);
  b.v_s /= dn;
  b.v_s = 0.5 * (b.v_s + b.v_s.transpose()).eval();
  return b;
}

}  // namespace

VarianceBundle variance_bundle(const ClusteredDesign& d, const Kernel& kernel,
                               const Vector& beta, VarianceEstimator estimator) {
  const Vector eps = residuals(d, beta);
  VarianceBundle b;
  if (estimator == VarianceEstimator::Plain) {
    b = plain_statistics(pair_products(kernel.K, d.blocks, eps, d.X), d.n(), d.k()).bundle;
  } else {
    b = cross_fit_bundle(d, kernel, eps);
    finalize_v_ar(b);
  }
  return b;
}

VarianceBundle variance_bundle(const ClusteredDesign& d, const Vector& beta, KernelChoice choice,
                               VarianceEstimator estimator) {
  return variance_bundle(d, build_kernel(d, choice), beta, estimator);
}

AnalyticVariances analytic_variances(const AnalyticVarianceInputs& in, const Matrix& K,
                                     const ClusterBlocks& blocks, std::size_t k) {
  const std::size_t G = blocks.G();
  if (in.sigma.size() != G || K.rows() != K.cols() ||
      static_cast<std::size_t>(K.rows()) != blocks.n()) {
    throw Error(ErrorCode::DimensionMismatch, "analytic_variances: inputs do not match blocks");
  }
  for (std::size_t g = 0; g < G; ++g) {
    const auto l = idx(blocks[g].length);
    if (in.sigma[g].rows() != l || in.sigma[g].cols() != l) {
      throw Error(ErrorCode::DimensionMismatch, "Sigma_g has the wrong order");
    }
  }
  const double dk = static_cast<double>(k);
  const double dn = static_cast<double>(blocks.n());
  const auto blk = [&](std::size_t g, std::size_t h) {
    return K.block(idx(blocks[g].start), idx(blocks[h].start), idx(blocks[g].length),
                   idx(blocks[h].length));
  };

  const bool have_xi = in.xi.size() == G;
  const std::size_t p = have_xi ? in.xi[0].size() : 0;
  const bool have_vs = have_xi && in.omega.size() == G &&
                       static_cast<std::size_t>(in.z_pi.cols()) == p &&
                       static_cast<std::size_t>(in.z_pi.rows()) == blocks.n();

  AnalyticVariances out;
  Vector c = Vector::Zero(idx(p));
  Matrix vs = Matrix::Zero(idx(p), idx(p));
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t h = 0; h < G; ++h) {
      if (g == h) continue;
      // S = K_gh Sigma_h K_hg
      const Matrix S = blk(g, h) * in.sigma[h] * blk(h, g);
      out.v_ar += (in.sigma[g] * S).trace();
      if (!have_xi) continue;
      for (std::size_t i = 0; i < p; ++i) {
        c(idx(i)) += (in.xi[g][i] * S).trace();
        if (!have_vs) continue;
        for (std::size_t j = 0; j < p; ++j) {
          vs(idx(i), idx(j)) += (S * in.omega[g][j * p + i]).trace() +
                                (blk(h, g) * in.xi[g][i] * blk(g, h) * in.xi[h][j]).trace();
        }
      }
    }
  }
  out.v_ar *= 2.0 / dk;
  if (have_xi) out.c = c * 2.0 / std::sqrt(dn * dk);
  if (have_vs) {
    // (Z Pi)' K Sigma K (Z Pi) with Sigma block diagonal.
    const Matrix KZPi = K * in.z_pi;
    for (std::size_t g = 0; g < G; ++g) {
      const auto rg = KZPi.middleRows(idx(blocks[g].start), idx(blocks[g].length));
      vs.noalias() += rg.transpose() * in.sigma[g] * rg;
    }
    out.v_s = vs / dn;
  }
  return out;
}

Vector joint_standardize(double ar, const Vector& score, const VarianceBundle& bundle) {
  const Index p = score.size();
  Matrix V(p + 1, p + 1);
  V(0, 0) = bundle.v_ar;
  V.block(1, 0, p, 1) = bundle.c;
  V.block(0, 1, 1, p) = bundle.c.transpose();
  V.block(1, 1, p, p) = bundle.v_s;
  const Vector diag = V.diagonal();
  if ((diag.array() <= 0.0).any()) {
    throw Error(ErrorCode::SingularJointVariance, "a joint variance entry is not positive");
  }
  const Vector dinv = diag.cwiseSqrt().cwiseInverse();
  const Matrix R = dinv.asDiagonal() * V * dinv.asDiagonal();
  Eigen::SelfAdjointEigenSolver<Matrix> rs(R, Eigen::EigenvaluesOnly);
  if (rs.eigenvalues().minCoeff() <= 1e-10) {
    throw Error(ErrorCode::SingularJointVariance,
                "AR and score statistics are perfectly correlated");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(V);
  const Vector lam = es.eigenvalues();
  const double floor = 1e-12 * lam.maxCoeff();
  const Vector inv_sqrt = lam.unaryExpr([floor](double x) { return 1.0 / std::sqrt(std::max(x, floor)); });
  const Matrix Vih = es.eigenvectors() * inv_sqrt.asDiagonal() * es.eigenvectors().transpose();
  Vector stats(p + 1);
  stats(0) = ar;
  stats.tail(p) = score;
  return Vih * stats;
}

Vector joint_standardized(const ClusteredDesign& d, const Vector& beta, KernelChoice choice,
                          VarianceEstimator estimator) {
  const Kernel kernel = build_kernel(d, choice);
  const VarianceBundle b = variance_bundle(d, kernel, beta, estimator);
  return joint_standardize(ar_statistic(d, kernel, beta), score_statistic(d, kernel, beta), b);
}

ClcEstimates clc_estimators(const ClusteredDesign& d, const Vector& beta) {
  if (d.p() != 1) {
    throw Error(ErrorCode::UnsupportedDimension,
                "conditional linear combination estimators need a single regressor");
  }
  const Kernel kernel = build_kernel(d, KernelChoice::PlainClusterJackknife);
  const Vector eps = residuals(d, beta);
  const ClusterPairProducts pp = pair_products(kernel.K, d.blocks, eps, d.X);
  const Vector x = d.X.col(0);
  const Matrix F = cluster_weighted_sums(x, kernel_times_blockified(kernel.K, d.blocks, x),
                                         d.blocks);
  const double dk = static_cast<double>(d.k());
  const Matrix& A = pp.A;
  const Matrix& D = pp.D[0];
  const Matrix& E = pp.E[0];

  ClcEstimates out;
  out.phi1 = 2.0 / dk * offdiag_dot(A, A.transpose());
  // X_g'P_gh e_h e_h'P_hg e_g + X_h'P_hg e_g e_h'P_hg e_g
  out.phi12 = (offdiag_dot(D, A.transpose()) + offdiag_dot(D.transpose(), A.transpose())) / dk;
  out.phi13 = 2.0 / dk * offdiag_dot(A, F);
  const Vector colsum = D.colwise().sum().transpose() - D.diagonal();
  out.psi = (colsum.squaredNorm() + offdiag_dot(D, E)) / dk;
  out.upsilon = 2.0 / dk * offdiag_dot(F, F.transpose());
  return out;
}

}  // namespace clusteriv
