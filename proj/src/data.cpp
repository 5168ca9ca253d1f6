#include "clusteriv/data.hpp"

#include "clusteriv/error.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

namespace clusteriv {

const char* to_string(ControlsState s) {
  switch (s) {
    case ControlsState::None: return "none";
    case ControlsState::Pending: return "pending";
    case ControlsState::PartialledNaively: return "partialled";
  }
  return "unknown";
}

void check_design(const ClusteredDesign& d) {
  const auto n = d.y.size();
  if (n == 0) throw Error(ErrorCode::EmptyData, "design has no observations");
  if (d.X.rows() != n || d.Z.rows() != n || (d.W.cols() > 0 && d.W.rows() != n) ||
      static_cast<std::size_t>(n) != d.blocks.n()) {
    throw Error(ErrorCode::DimensionMismatch, "y, X, Z, W and clusters must have the same rows");
  }
  if (d.X.cols() < 1) throw Error(ErrorCode::InvalidArgument, "need at least one regressor");
  if (d.Z.cols() < 1) throw Error(ErrorCode::InvalidArgument, "need at least one instrument");
  if (d.blocks.G() < 2) throw Error(ErrorCode::InvalidArgument, "need at least two clusters");
  if (!d.y.allFinite() || !d.X.allFinite() || !d.Z.allFinite() || !d.W.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "design contains non-finite values");
  }
}

ClusteredDesign make_design(Vector y, Matrix X, Matrix Z, ClusterBlocks blocks, Matrix W) {
  ClusteredDesign d;
  d.y = std::move(y);
  d.X = std::move(X);
  d.Z = std::move(Z);
  d.blocks = std::move(blocks);
  if (W.cols() > 0) {
    d.W = std::move(W);
    d.controls = ControlsState::Pending;
  } else {
    d.W = Matrix(d.y.size(), 0);
  }
  check_design(d);
  return d;
}

ClusteredDesign with_singleton_clusters(const ClusteredDesign& d) {
  ClusteredDesign s = d;
  s.blocks = ClusterBlocks::singletons(d.n());
  s.cluster_labels.clear();
  return s;
}

std::vector<std::size_t> cluster_sort_permutation(std::span<const std::string> labels) {
  std::unordered_map<std::string, std::size_t> first;
  for (std::size_t i = 0; i < labels.size(); ++i) first.try_emplace(labels[i], first.size());
  std::vector<std::size_t> perm(labels.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::stable_sort(perm.begin(), perm.end(), [&](std::size_t a, std::size_t b) {
    return first.at(labels[a]) < first.at(labels[b]);
  });
  return perm;
}

namespace {

// Splits one CSV record. Double-quoted fields may contain commas and "" escapes.
std::vector<std::string> split_record(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(std::move(cur));
  return out;
}

std::string trim(std::string s) {
  const auto notspace = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), notspace));
  s.erase(std::find_if(s.rbegin(), s.rend(), notspace).base(), s.end());
  return s;
}

double parse_number(const std::string& field, std::size_t row, const std::string& col) {
  const std::string t = trim(field);
  if (t.empty()) throw ParseErrorAt(row, col, "missing value");
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(t.c_str(), &end);
  if (end != t.c_str() + t.size() || errno == ERANGE || !std::isfinite(v)) {
    throw ParseErrorAt(row, col, "not a finite number: '" + t + "'");
  }
  return v;
}

}  // namespace

ClusteredDesign load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::InvalidArgument, "cannot open " + path.string());
  return load_csv(in, schema);
}

ClusteredDesign load_csv(std::istream& in, const CsvSchema& schema) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::EmptyData, "CSV has no header row");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = split_record(line);
  for (auto& h : header) h = trim(h);

  const auto column = [&](const std::string& name) {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      throw Error(ErrorCode::MissingColumn, "column '" + name + "' not in CSV header");
    }
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto columns = [&](const std::vector<std::string>& names) {
    std::vector<std::size_t> idx;
    for (const auto& nm : names) idx.push_back(column(nm));
    return idx;
  };
  if (schema.outcome.empty() || schema.cluster.empty() || schema.endogenous.empty() ||
      schema.instruments.empty()) {
    throw Error(ErrorCode::InvalidArgument,
                "schema needs an outcome, a cluster column, regressors and instruments");
  }
  const std::size_t cy = column(schema.outcome);
  const std::size_t cc = column(schema.cluster);
  const auto cx = columns(schema.endogenous);
  const auto cz = columns(schema.instruments);
  const auto cw = columns(schema.controls);

  std::vector<std::string> labels;
  std::vector<double> ys;
  std::vector<std::vector<double>> xs, zs, ws;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    ++row;
    const auto fields = split_record(line);
    if (fields.size() != header.size()) {
      throw ParseErrorAt(row, "*", "expected " + std::to_string(header.size()) +
                                       " fields, found " + std::to_string(fields.size()));
    }
    const std::string label = trim(fields[cc]);
    if (label.empty()) throw ParseErrorAt(row, schema.cluster, "missing cluster label");
    labels.push_back(label);
    ys.push_back(parse_number(fields[cy], row, schema.outcome));
    const auto grab = [&](const std::vector<std::size_t>& idx,
                          const std::vector<std::string>& names) {
      std::vector<double> r;
      r.reserve(idx.size());
      for (std::size_t j = 0; j < idx.size(); ++j) {
        r.push_back(parse_number(fields[idx[j]], row, names[j]));
      }
      return r;
    };
    xs.push_back(grab(cx, schema.endogenous));
    zs.push_back(grab(cz, schema.instruments));
    ws.push_back(grab(cw, schema.controls));
  }
  if (row == 0) throw Error(ErrorCode::EmptyData, "CSV has no data rows");

  const auto perm = cluster_sort_permutation(labels);
  const auto n = static_cast<Eigen::Index>(row);
  Vector y(n);
  Matrix X(n, static_cast<Eigen::Index>(cx.size()));
  Matrix Z(n, static_cast<Eigen::Index>(cz.size()));
  Matrix W(n, static_cast<Eigen::Index>(cw.size()));
  std::vector<std::string> sorted_labels(perm.size());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto src = perm[static_cast<std::size_t>(i)];
    sorted_labels[static_cast<std::size_t>(i)] = labels[src];
    y(i) = ys[src];
    for (std::size_t j = 0; j < cx.size(); ++j) X(i, static_cast<Eigen::Index>(j)) = xs[src][j];
    for (std::size_t j = 0; j < cz.size(); ++j) Z(i, static_cast<Eigen::Index>(j)) = zs[src][j];
    for (std::size_t j = 0; j < cw.size(); ++j) W(i, static_cast<Eigen::Index>(j)) = ws[src][j];
  }
  ClusterBlocks blocks = block_partition(std::span<const std::string>(sorted_labels));

  ClusteredDesign d = make_design(std::move(y), std::move(X), std::move(Z), std::move(blocks),
                                  std::move(W));
  for (std::size_t g = 0; g < d.blocks.G(); ++g) {
    d.cluster_labels.push_back(sorted_labels[d.blocks[g].start]);
  }
  d.y_name = schema.outcome;
  d.x_names = schema.endogenous;
  d.z_names = schema.instruments;
  d.w_names = schema.controls;
  return d;
}

ValidationReport validate(const ClusteredDesign& d) {
  check_design(d);
  ValidationReport r;
  r.n = d.n();
  r.k = d.k();
  r.p = d.p();
  r.l = d.l();
  r.G = d.G();
  r.n_max = d.blocks.n_max();
  r.n_max_over_G = static_cast<double>(r.n_max) / static_cast<double>(r.G);
  r.k_less_than_G = r.k < r.G;

  if (d.controls == ControlsState::Pending) orthonormal_basis(d.W, "W");
  r.rank_z = numerical_rank(d.Z);
  const Matrix Q = orthonormal_basis(d.Z, "Z");

  r.cluster_leverage.resize(r.G);
  for (std::size_t g = 0; g < r.G; ++g) {
    const auto s = static_cast<Eigen::Index>(d.blocks[g].start);
    const auto l = static_cast<Eigen::Index>(d.blocks[g].length);
    // ||P_gg||_2 = ||Q_g||_2^2 for P_gg = Q_g Q_g'.
    Eigen::JacobiSVD<Matrix> svd(Q.middleRows(s, l));
    const double sv = svd.singularValues().size() > 0 ? svd.singularValues()(0) : 0.0;
    r.cluster_leverage[g] = std::clamp(sv * sv, 0.0, 1.0);
    if (r.cluster_leverage[g] > r.max_leverage) {
      r.max_leverage = r.cluster_leverage[g];
      r.max_leverage_cluster = g;
    }
  }

  if (r.G < kSmallClusterCount) {
    r.warnings.push_back("G small (" + std::to_string(r.G) +
                         " clusters); the tests are justified by asymptotics in G");
  }
  if (!r.k_less_than_G) {
    r.warnings.push_back("k >= G; the cluster AR and many-instrument AR tests are unavailable");
  }
  if (r.max_leverage >= 1.0 - 1e-8) {
    r.warnings.push_back("cluster " + std::to_string(r.max_leverage_cluster) +
                         " has leverage 1; the symmetric jackknife kernel is undefined");
  }
  if (d.controls == ControlsState::Pending) {
    r.warnings.push_back("controls not partialled out; only the many-controls kernel applies");
  }
  return r;
}

ClusteredDesign partial_out_controls(const ClusteredDesign& d) {
  if (d.controls != ControlsState::Pending || d.W.cols() == 0) return d;
  const Matrix Q = orthonormal_basis(d.W, "W");
  ClusteredDesign out = d;
  const auto annihilate = [&Q](const auto& A) -> Matrix {
    Matrix R = A;
    R.noalias() -= Q * (Q.transpose() * A);
    return R;
  };
  out.y = annihilate(d.y);
  out.X = annihilate(d.X);
  out.Z = annihilate(d.Z);
  out.W = Matrix(d.W.rows(), 0);
  out.controls = ControlsState::PartialledNaively;
  return out;
}

}  // namespace clusteriv
