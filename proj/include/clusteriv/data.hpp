#pragma once

#include "clusteriv/blocks.hpp"

#include <cstddef>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <vector>

namespace clusteriv {

// How the exogenous controls W relate to y, X and Z.
enum class ControlsState {
  None,               // no controls supplied
  Pending,            // W present and untouched; only the many-controls kernel may use it
  PartialledNaively,  // y, X, Z premultiplied by M_W and W dropped
};

const char* to_string(ControlsState s);

// Linear IV data y = X beta + eps, X = Z Pi + eta, rows stacked by cluster.
struct ClusteredDesign {
  Vector y;
  Matrix X;  // n x p endogenous regressors
  Matrix Z;  // n x k instruments
  Matrix W;  // n x l exogenous controls (l may be 0)
  ClusterBlocks blocks;
  ControlsState controls = ControlsState::None;

  // Optional bookkeeping carried through from the input file.
  std::vector<std::string> cluster_labels;
  std::string y_name;
  std::vector<std::string> x_names, z_names, w_names;

  std::size_t n() const { return static_cast<std::size_t>(y.size()); }
  std::size_t p() const { return static_cast<std::size_t>(X.cols()); }
  std::size_t k() const { return static_cast<std::size_t>(Z.cols()); }
  std::size_t l() const { return static_cast<std::size_t>(W.cols()); }
  std::size_t G() const { return blocks.G(); }
};

// Assembles a design and checks shapes, finiteness, k >= 1, p >= 1, G >= 2.
// W may be empty; when non-empty the controls state becomes Pending.
ClusteredDesign make_design(Vector y, Matrix X, Matrix Z, ClusterBlocks blocks,
                            Matrix W = Matrix());

// Throws DimensionMismatch / InvalidArgument on a malformed design.
void check_design(const ClusteredDesign& d);

// Same data with every observation treated as its own cluster.
ClusteredDesign with_singleton_clusters(const ClusteredDesign& d);

// Stable permutation grouping equal labels, clusters in first-appearance order.
std::vector<std::size_t> cluster_sort_permutation(std::span<const std::string> labels);

struct CsvSchema {
  std::string outcome;
  std::vector<std::string> endogenous;
  std::vector<std::string> instruments;
  std::vector<std::string> controls;
  std::string cluster;
};

// Reads a headed, comma separated file. Rows are stably sorted by cluster
// label. Missing or non-numeric values raise ParseError with the 1-based data
// row (header excluded) and the column name.
ClusteredDesign load_csv(const std::filesystem::path& path, const CsvSchema& schema);
ClusteredDesign load_csv(std::istream& in, const CsvSchema& schema);

struct ValidationReport {
  bool contiguous = true;
  std::size_t n = 0, k = 0, p = 0, l = 0, G = 0, n_max = 0;
  std::size_t rank_z = 0;
  bool k_less_than_G = false;               // needed by the many-instrument AR
  std::vector<double> cluster_leverage;      // ||P_Z[g,g]||_2 per cluster
  double max_leverage = 0.0;
  std::size_t max_leverage_cluster = 0;
  double n_max_over_G = 0.0;
  std::vector<std::string> warnings;
};

// Clusters fewer than this trigger the small-G warning.
inline constexpr std::size_t kSmallClusterCount = 10;

// Computes the report; throws RankDeficient if Z (or pending W) lacks full
// column rank. Everything else is reported as a warning.
ValidationReport validate(const ClusteredDesign& d);

// Premultiplies y, X and Z by M_W and removes W. No-op when there are no
// pending controls.
ClusteredDesign partial_out_controls(const ClusteredDesign& d);

}  // namespace clusteriv
