#include "clusteriv/blocks.hpp"

#include "clusteriv/error.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace clusteriv {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::NonContiguousClusters: return "NonContiguousClusters";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::RankDeficientAfterDrop: return "RankDeficientAfterDrop";
    case ErrorCode::SingularClusterBlock: return "SingularClusterBlock";
    case ErrorCode::SingularKhatriRaoSystem: return "SingularKhatriRaoSystem";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::ParseError: return "ParseError";
    case ErrorCode::EmptyData: return "EmptyData";
    case ErrorCode::NegativeVariance: return "NegativeVariance";
    case ErrorCode::SingularJointVariance: return "SingularJointVariance";
    case ErrorCode::UnsupportedDimension: return "UnsupportedDimension";
    case ErrorCode::TooManyInstruments: return "TooManyInstruments";
    case ErrorCode::SingularWeight: return "SingularWeight";
    case ErrorCode::DegenerateVariance: return "DegenerateVariance";
    case ErrorCode::SingularMomentCovariance: return "SingularMomentCovariance";
    case ErrorCode::SingularScoreVariance: return "SingularScoreVariance";
    case ErrorCode::SingularW2: return "SingularW2";
    case ErrorCode::InfeasibleSizes: return "InfeasibleSizes";
  }
  return "Unknown";
}

namespace {

void require_square(const Matrix& A, const ClusterBlocks& blocks, const char* op) {
  if (A.rows() != A.cols() || static_cast<std::size_t>(A.rows()) != blocks.n()) {
    throw Error(ErrorCode::DimensionMismatch,
                std::string(op) + ": expected a square matrix of order " +
                    std::to_string(blocks.n()) + ", got " + std::to_string(A.rows()) + "x" +
                    std::to_string(A.cols()));
  }
}

template <class Label>
ClusterBlocks partition_impl(std::span<const Label> labels) {
  if (labels.empty()) throw Error(ErrorCode::EmptyData, "block_partition: no labels");
  std::vector<std::size_t> sizes;
  std::unordered_map<Label, bool> seen;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (i > 0 && labels[i] == labels[i - 1]) {
      ++sizes.back();
      continue;
    }
    if (seen.contains(labels[i])) {
      throw Error(ErrorCode::NonContiguousClusters,
                  "cluster label recurs at row " + std::to_string(i) +
                      " after a different label; sort rows by cluster first");
    }
    seen.emplace(labels[i], true);
    sizes.push_back(1);
  }
  return ClusterBlocks::from_sizes(sizes);
}

}  // namespace

ClusterBlocks ClusterBlocks::from_sizes(std::span<const std::size_t> sizes) {
  ClusterBlocks b;
  b.ranges_.reserve(sizes.size());
  std::size_t start = 0;
  for (std::size_t g = 0; g < sizes.size(); ++g) {
    if (sizes[g] == 0) {
      throw Error(ErrorCode::InvalidArgument, "cluster " + std::to_string(g) + " is empty");
    }
    b.ranges_.push_back({start, sizes[g]});
    start += sizes[g];
  }
  b.n_ = start;
  return b;
}

ClusterBlocks ClusterBlocks::singletons(std::size_t n) {
  std::vector<std::size_t> ones(n, 1);
  return from_sizes(ones);
}

std::size_t ClusterBlocks::n_max() const {
  std::size_t m = 0;
  for (const auto& r : ranges_) m = std::max(m, r.length);
  return m;
}

std::vector<std::size_t> ClusterBlocks::sizes() const {
  std::vector<std::size_t> s;
  s.reserve(ranges_.size());
  for (const auto& r : ranges_) s.push_back(r.length);
  return s;
}

std::vector<std::size_t> ClusterBlocks::membership() const {
  std::vector<std::size_t> m(n_);
  for (std::size_t g = 0; g < ranges_.size(); ++g) {
    std::fill_n(m.begin() + static_cast<std::ptrdiff_t>(ranges_[g].start), ranges_[g].length, g);
  }
  return m;
}

std::size_t ClusterBlocks::vecb_length() const {
  std::size_t s = 0;
  for (const auto& r : ranges_) s += r.length * r.length;
  return s;
}

ClusterBlocks ClusterBlocks::select(std::span<const std::size_t> clusters) const {
  std::vector<std::size_t> s;
  s.reserve(clusters.size());
  for (auto g : clusters) s.push_back(ranges_.at(g).length);
  return from_sizes(s);
}

ClusterBlocks block_partition(std::span<const std::string> labels) {
  return partition_impl(labels);
}

ClusterBlocks block_partition(std::span<const long long> labels) {
  return partition_impl(labels);
}

Matrix block_diagonal_part(const Matrix& A, const ClusterBlocks& blocks) {
  require_square(A, blocks, "block_diagonal_part");
  Matrix B = Matrix::Zero(A.rows(), A.cols());
  for (const auto& r : blocks.ranges()) {
    const auto s = static_cast<Eigen::Index>(r.start);
    const auto l = static_cast<Eigen::Index>(r.length);
    B.block(s, s, l, l) = A.block(s, s, l, l);
  }
  return B;
}

Matrix zero_block_diagonal(const Matrix& A, const ClusterBlocks& blocks) {
  require_square(A, blocks, "zero_block_diagonal");
  Matrix B = A;
  clear_block_diagonal(B, blocks);
  return B;
}

double max_abs_block_diagonal(const Matrix& A, const ClusterBlocks& blocks) {
  require_square(A, blocks, "max_abs_block_diagonal");
  double m = 0.0;
  for (const auto& r : blocks.ranges()) {
    const auto s = static_cast<Eigen::Index>(r.start);
    const auto l = static_cast<Eigen::Index>(r.length);
    m = std::max(m, A.block(s, s, l, l).cwiseAbs().maxCoeff());
  }
  return m;
}

void clear_block_diagonal(Matrix& A, const ClusterBlocks& blocks) {
  require_square(A, blocks, "clear_block_diagonal");
  for (const auto& r : blocks.ranges()) {
    const auto s = static_cast<Eigen::Index>(r.start);
    const auto l = static_cast<Eigen::Index>(r.length);
    A.block(s, s, l, l).setZero();
  }
}

Matrix column_blockify(const Vector& v, const ClusterBlocks& blocks) {
  if (static_cast<std::size_t>(v.size()) != blocks.n()) {
    throw Error(ErrorCode::DimensionMismatch, "column_blockify: vector length " +
                                                  std::to_string(v.size()) + " != n = " +
                                                  std::to_string(blocks.n()));
  }
  Matrix B = Matrix::Zero(v.size(), static_cast<Eigen::Index>(blocks.G()));
  for (std::size_t g = 0; g < blocks.G(); ++g) {
    const auto s = static_cast<Eigen::Index>(blocks[g].start);
    const auto l = static_cast<Eigen::Index>(blocks[g].length);
    B.col(static_cast<Eigen::Index>(g)).segment(s, l) = v.segment(s, l);
  }
  return B;
}

Matrix cluster_weighted_sums(const Vector& a, const Matrix& M, const ClusterBlocks& blocks) {
  if (static_cast<std::size_t>(a.size()) != blocks.n() || a.size() != M.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "cluster_weighted_sums: row count mismatch");
  }
  Matrix S(static_cast<Eigen::Index>(blocks.G()), M.cols());
  for (std::size_t g = 0; g < blocks.G(); ++g) {
    const auto s = static_cast<Eigen::Index>(blocks[g].start);
    const auto l = static_cast<Eigen::Index>(blocks[g].length);
    S.row(static_cast<Eigen::Index>(g)) = a.segment(s, l).transpose() * M.middleRows(s, l);
  }
  return S;
}

double rank_threshold(std::size_t rows, std::size_t cols) {
  return static_cast<double>(std::max(rows, cols)) * std::numeric_limits<double>::epsilon();
}

std::size_t numerical_rank(const Matrix& A) {
  if (A.cols() == 0 || A.rows() == 0) return 0;
  Eigen::ColPivHouseholderQR<Matrix> qr(A);
  qr.setThreshold(rank_threshold(static_cast<std::size_t>(A.rows()),
                                 static_cast<std::size_t>(A.cols())));
  return static_cast<std::size_t>(qr.rank());
}

Matrix orthonormal_basis(const Matrix& Z, const std::string& what) {
  const auto n = Z.rows();
  const auto k = Z.cols();
  if (k == 0) return Matrix(n, 0);
  if (!Z.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, what + " contains non-finite entries");
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(Z);
  qr.setThreshold(rank_threshold(static_cast<std::size_t>(n), static_cast<std::size_t>(k)));
  const auto r = static_cast<std::size_t>(qr.rank());
  if (r < static_cast<std::size_t>(k)) {
    throw RankDeficientError(r, static_cast<std::size_t>(k), what + " is rank deficient");
  }
  Matrix Q = qr.householderQ() * Matrix::Identity(n, k);
  return Q;
}

Matrix projection_from_basis(const Matrix& Q) {
  const auto n = Q.rows();
  Matrix P = Matrix::Zero(n, n);
  P.selfadjointView<Eigen::Lower>().rankUpdate(Q);
  P.triangularView<Eigen::StrictlyUpper>() = P.transpose();
  return P;
}

ProjectionPair projection_pair(const Matrix& Z) {
  const Matrix Q = orthonormal_basis(Z);
  ProjectionPair out;
  out.P = projection_from_basis(Q);
  out.M = -out.P;
  out.M.diagonal().array() += 1.0;
  return out;
}

Matrix khatri_rao(const Matrix& A, const Matrix& B, const ClusterBlocks& row_blocks,
                  const ClusterBlocks& col_blocks) {
  if (A.rows() != B.rows() || A.cols() != B.cols() ||
      static_cast<std::size_t>(A.rows()) != row_blocks.n() ||
      static_cast<std::size_t>(A.cols()) != col_blocks.n()) {
    throw Error(ErrorCode::DimensionMismatch, "khatri_rao: partitions do not conform");
  }
  std::vector<Eigen::Index> row_off(row_blocks.G() + 1, 0), col_off(col_blocks.G() + 1, 0);
  for (std::size_t h = 0; h < row_blocks.G(); ++h) {
    const auto len = static_cast<Eigen::Index>(row_blocks[h].length);
    row_off[h + 1] = row_off[h] + len * len;
  }
  for (std::size_t g = 0; g < col_blocks.G(); ++g) {
    const auto len = static_cast<Eigen::Index>(col_blocks[g].length);
    col_off[g + 1] = col_off[g] + len * len;
  }
  // Block (h, g) is r_h x c_g, its Kronecker square r_h^2 x c_g^2.
  Matrix R = Matrix::Zero(row_off.back(), col_off.back());
  for (std::size_t h = 0; h < row_blocks.G(); ++h) {
    const auto rs = static_cast<Eigen::Index>(row_blocks[h].start);
    const auto rl = static_cast<Eigen::Index>(row_blocks[h].length);
    for (std::size_t g = 0; g < col_blocks.G(); ++g) {
      const auto cs = static_cast<Eigen::Index>(col_blocks[g].start);
      const auto cl = static_cast<Eigen::Index>(col_blocks[g].length);
      auto a = A.block(rs, cs, rl, cl);
      auto b = B.block(rs, cs, rl, cl);
      auto out = R.block(row_off[h], col_off[g], rl * rl, cl * cl);
      for (Eigen::Index i = 0; i < rl; ++i) {
        for (Eigen::Index j = 0; j < cl; ++j) {
          out.block(i * rl, j * cl, rl, cl) = a(i, j) * b;
        }
      }
    }
  }
  return R;
}

Vector vecb(const Matrix& A, const ClusterBlocks& blocks) {
  require_square(A, blocks, "vecb");
  Vector v(static_cast<Eigen::Index>(blocks.vecb_length()));
  Eigen::Index pos = 0;
  for (const auto& r : blocks.ranges()) {
    const auto s = static_cast<Eigen::Index>(r.start);
    const auto l = static_cast<Eigen::Index>(r.length);
    for (Eigen::Index c = 0; c < l; ++c) {
      v.segment(pos, l) = A.col(s + c).segment(s, l);
      pos += l;
    }
  }
  return v;
}

Matrix vecb_inv(const Vector& v, const ClusterBlocks& blocks) {
  if (static_cast<std::size_t>(v.size()) != blocks.vecb_length()) {
    throw Error(ErrorCode::DimensionMismatch,
                "vecb_inv: length " + std::to_string(v.size()) + " != sum n_g^2 = " +
                    std::to_string(blocks.vecb_length()));
  }
  const auto n = static_cast<Eigen::Index>(blocks.n());
  Matrix A = Matrix::Zero(n, n);
  Eigen::Index pos = 0;
  for (const auto& r : blocks.ranges()) {
    const auto s = static_cast<Eigen::Index>(r.start);
    const auto l = static_cast<Eigen::Index>(r.length);
    for (Eigen::Index c = 0; c < l; ++c) {
      A.col(s + c).segment(s, l) = v.segment(pos, l);
      pos += l;
    }
  }
  return A;
}

Matrix symmetric_jackknife_matrix(const Matrix& Z, const ClusterBlocks& blocks,
                                  double* residual) {
  if (static_cast<std::size_t>(Z.rows()) != blocks.n()) {
    throw Error(ErrorCode::DimensionMismatch, "symmetric_jackknife_matrix: Z rows != n");
  }
  const auto pair = projection_pair(Z);
  Matrix Pt = pair.P;
  const double tol = rank_threshold(blocks.n(), static_cast<std::size_t>(Z.cols()));
  for (std::size_t g = 0; g < blocks.G(); ++g) {
    const auto s = static_cast<Eigen::Index>(blocks[g].start);
    const auto l = static_cast<Eigen::Index>(blocks[g].length);
    const Matrix Pgg = pair.P.block(s, s, l, l);
    const Matrix Mgg = pair.M.block(s, s, l, l);
    Eigen::SelfAdjointEigenSolver<Matrix> es(Mgg, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= tol) throw SingularClusterBlockError(g);
    // P_gg and M_gg commute, so P_gg M_gg^{-1} = M_gg^{-1} P_gg.
    const Matrix T = Mgg.ldlt().solve(Pgg);
    Pt.middleRows(s, l).noalias() -= T * pair.M.middleRows(s, l);
  }
  if (residual != nullptr) *residual = max_abs_block_diagonal(Pt, blocks);
  clear_block_diagonal(Pt, blocks);
  return Pt;
}

ManyControlsKernel many_controls_kernel(const Matrix& Zbar, const Matrix& W,
                                        const ClusterBlocks& blocks) {
  const auto n = static_cast<Eigen::Index>(blocks.n());
  if (Zbar.rows() != n || W.rows() != n) {
    throw Error(ErrorCode::DimensionMismatch, "many_controls_kernel: row counts differ from n");
  }
  const Matrix QW = orthonormal_basis(W, "W");
  Matrix MZ = Zbar;
  if (QW.cols() > 0) MZ.noalias() -= QW * (QW.transpose() * Zbar);
  const Matrix QZ = orthonormal_basis(MZ, "M_W Zbar");
  const Matrix P = projection_from_basis(QZ);

  Matrix MW = -projection_from_basis(QW);
  MW.diagonal().array() += 1.0;

  const Matrix S = khatri_rao(MW, MW, blocks, blocks);
  const Vector rhs = vecb(P, blocks);
  Eigen::CompleteOrthogonalDecomposition<Matrix> cod(S);
  const Vector x = cod.solve(rhs);

  ManyControlsKernel out;
  out.H = vecb_inv(x, blocks);
  out.H = 0.5 * (out.H + out.H.transpose()).eval();

  // M H M with M = I - QW QW' and H block diagonal.
  Matrix MH = out.H;
  if (QW.cols() > 0) MH.noalias() -= QW * (QW.transpose() * out.H);
  Matrix MHM = MH;
  if (QW.cols() > 0) MHM.noalias() -= (MH * QW) * QW.transpose();

  const double pscale = std::max(1.0, P.cwiseAbs().maxCoeff());
  out.system_residual = (rhs - vecb(MHM, blocks)).cwiseAbs().maxCoeff();
  if (!std::isfinite(out.system_residual) || out.system_residual > 1e-8 * pscale) {
    throw Error(ErrorCode::SingularKhatriRaoSystem,
                "(M_W * M_W) vecb(H) = vecb(P) has no solution (residual " +
                    std::to_string(out.system_residual) +
                    "); cluster structure is too coarse for the controls");
  }
  out.K = P - MHM;
  out.K = 0.5 * (out.K + out.K.transpose()).eval();
  out.pre_zero_residual = max_abs_block_diagonal(out.K, blocks);
  clear_block_diagonal(out.K, blocks);
  return out;
}

Vector leave_clusters_out_fit(const Matrix& Z, const Vector& v, const ClusterBlocks& blocks,
                              std::span<const std::size_t> drop) {
  if (static_cast<std::size_t>(Z.rows()) != blocks.n() || v.size() != Z.rows()) {
    throw Error(ErrorCode::DimensionMismatch, "leave_clusters_out_fit: row counts differ");
  }
  if (drop.size() > 2) {
    throw Error(ErrorCode::InvalidArgument, "leave_clusters_out_fit drops at most two clusters");
  }
  std::vector<char> dropped(blocks.G(), 0);
  for (auto g : drop) {
    if (g >= blocks.G()) throw Error(ErrorCode::InvalidArgument, "cluster id out of range");
    dropped[g] = 1;
  }
  std::vector<Eigen::Index> keep;
  keep.reserve(blocks.n());
  for (std::size_t g = 0; g < blocks.G(); ++g) {
    if (dropped[g]) continue;
    for (std::size_t i = blocks[g].start; i < blocks[g].end(); ++i) {
      keep.push_back(static_cast<Eigen::Index>(i));
    }
  }
  const Matrix Zk = Z(keep, Eigen::all);
  const Vector vk = v(keep);
  Eigen::ColPivHouseholderQR<Matrix> qr(Zk);
  qr.setThreshold(rank_threshold(keep.size(), static_cast<std::size_t>(Z.cols())));
  if (Zk.rows() == 0 || static_cast<Eigen::Index>(qr.rank()) < Z.cols()) {
    throw RankDeficientAfterDropError({drop.begin(), drop.end()},
                                      "Z loses rank after dropping clusters");
  }
  const Vector coef = qr.solve(vk);
  return Z * coef;
}

}  // namespace clusteriv
