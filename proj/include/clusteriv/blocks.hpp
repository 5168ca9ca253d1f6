#pragma once

// Block-structured matrix algebra for data stacked by cluster.

#include <Eigen/Dense>

#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace clusteriv {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct BlockRange {
  std::size_t start = 0;
  std::size_t length = 0;
  std::size_t end() const { return start + length; }
  bool operator==(const BlockRange&) const = default;
};

// Contiguous partition of the rows 0..n-1 into G clusters, in stacking order.
class ClusterBlocks {
 public:
  ClusterBlocks() = default;

  // Throws InvalidArgument unless every size is >= 1.
  static ClusterBlocks from_sizes(std::span<const std::size_t> sizes);
  static ClusterBlocks singletons(std::size_t n);

  std::size_t n() const { return n_; }
  std::size_t G() const { return ranges_.size(); }
  std::size_t n_max() const;
  const BlockRange& operator[](std::size_t g) const { return ranges_[g]; }
  const std::vector<BlockRange>& ranges() const { return ranges_; }
  std::vector<std::size_t> sizes() const;
  // Cluster id of each row.
  std::vector<std::size_t> membership() const;
  // Sum of n_g^2, the length of vecb().
  std::size_t vecb_length() const;

  // Subset of clusters, rows renumbered contiguously.
  ClusterBlocks select(std::span<const std::size_t> clusters) const;

  bool operator==(const ClusterBlocks&) const = default;

 private:
  std::vector<BlockRange> ranges_;
  std::size_t n_ = 0;
};

// Rows with equal labels must be adjacent; clusters are numbered in order of
// first appearance. Throws NonContiguousClusters otherwise.
ClusterBlocks block_partition(std::span<const std::string> labels);
ClusterBlocks block_partition(std::span<const long long> labels);

// B_A: diagonal blocks of A kept, everything else zero.
Matrix block_diagonal_part(const Matrix& A, const ClusterBlocks& blocks);
// A - B_A.
Matrix zero_block_diagonal(const Matrix& A, const ClusterBlocks& blocks);
// Largest |entry| inside the diagonal blocks.
double max_abs_block_diagonal(const Matrix& A, const ClusterBlocks& blocks);
// Sets diagonal blocks to zero in place.
void clear_block_diagonal(Matrix& A, const ClusterBlocks& blocks);

// n x G matrix B_v whose column g holds v[g] on the rows of cluster g.
Matrix column_blockify(const Vector& v, const ClusterBlocks& blocks);

// Per-cluster sums of row-wise products: row g of the result is
// sum_{i in [g]} a_i * M.row(i), i.e. B_a' M.
Matrix cluster_weighted_sums(const Vector& a, const Matrix& M, const ClusterBlocks& blocks);

// Numerical rank tolerance used throughout: max(rows, cols) * eps relative to
// the largest pivot of a column-pivoted QR.
double rank_threshold(std::size_t rows, std::size_t cols);
std::size_t numerical_rank(const Matrix& A);

// Orthonormal basis Q (n x k) for the column space of Z. Throws RankDeficient
// when rank(Z) < k.
Matrix orthonormal_basis(const Matrix& Z, const std::string& what = "Z");

struct ProjectionPair {
  Matrix P;  // Z (Z'Z)^{-1} Z', exactly symmetric
  Matrix M;  // I - P
};
ProjectionPair projection_pair(const Matrix& Z);
// P = Q Q' assembled through a symmetric rank update so P == P' bitwise.
Matrix projection_from_basis(const Matrix& Q);

// Blockwise Kronecker product. Block (h, g) of the result is A_hg (x) B_hg
// where the row partition of A and B is row_blocks and the column partition
// col_blocks.
Matrix khatri_rao(const Matrix& A, const Matrix& B, const ClusterBlocks& row_blocks,
                  const ClusterBlocks& col_blocks);

// Concatenated column-major vectorisations of the diagonal blocks.
Vector vecb(const Matrix& A, const ClusterBlocks& blocks);
// Block-diagonal matrix built from vecb-ordered entries.
Matrix vecb_inv(const Vector& v, const ClusterBlocks& blocks);

// Matrix whose product with a vector leave-one-cluster-out fits it on Z:
// P_Z - B_{P_Z} B_{M_Z}^{-1} M_Z. Its diagonal blocks are zeroed exactly; the
// magnitude removed is reported through residual when non-null.
Matrix symmetric_jackknife_matrix(const Matrix& Z, const ClusterBlocks& blocks,
                                  double* residual = nullptr);

struct ManyControlsKernel {
  Matrix K;                     // P_{M_W Zbar} - M_W H M_W, zero block diagonal
  Matrix H;                     // block diagonal solution of the Khatri-Rao system
  double pre_zero_residual = 0; // max |block diag| before enforcement
  double system_residual = 0;   // max |vecb(P) - vecb(M H M)|
};

// Kernel centring the jackknife statistics when many controls W are
// partialled out. With l = 0 this is zero_block_diagonal(P_Zbar).
//
// The system (M_W * M_W) vecb(H) = vecb(P_{M_W Zbar}) is of size sum n_g^2 and
// is solved densely, O((sum n_g^2)^3). A rank-deficient but consistent system
// (for instance W holding cluster dummies) is solved in the minimum-norm sense;
// an inconsistent one throws SingularKhatriRaoSystem.
ManyControlsKernel many_controls_kernel(const Matrix& Zbar, const Matrix& W,
                                        const ClusterBlocks& blocks);

// Z (Z'_{-d} Z_{-d})^{-1} Z'_{-d} v_{-d} for the dropped cluster set d (0, 1 or
// 2 clusters). Throws RankDeficientAfterDrop when Z_{-d} loses rank.
Vector leave_clusters_out_fit(const Matrix& Z, const Vector& v, const ClusterBlocks& blocks,
                              std::span<const std::size_t> drop);

}  // namespace clusteriv
