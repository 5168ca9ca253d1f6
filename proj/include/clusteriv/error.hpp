#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace clusteriv {

enum class ErrorCode {
  InvalidArgument,
  DimensionMismatch,
  NonContiguousClusters,
  RankDeficient,
  RankDeficientAfterDrop,
  SingularClusterBlock,
  SingularKhatriRaoSystem,
  MissingColumn,
  ParseError,
  EmptyData,
  NegativeVariance,
  SingularJointVariance,
  UnsupportedDimension,
  TooManyInstruments,
  SingularWeight,
  DegenerateVariance,
  SingularMomentCovariance,
  SingularScoreVariance,
  SingularW2,
  InfeasibleSizes,
};

const char* to_string(ErrorCode code);

// Base for every failure raised by the library. Callers that only care about
// the category switch on code(); the payload-carrying subclasses below expose
// the extra context.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

class RankDeficientError : public Error {
 public:
  RankDeficientError(std::size_t observed, std::size_t expected, const std::string& what)
      : Error(ErrorCode::RankDeficient, what + " (rank " + std::to_string(observed) + " < " +
                                            std::to_string(expected) + ")"),
        observed_rank(observed),
        expected_rank(expected) {}
  std::size_t observed_rank;
  std::size_t expected_rank;
};

class RankDeficientAfterDropError : public Error {
 public:
  RankDeficientAfterDropError(std::vector<std::size_t> dropped, const std::string& what)
      : Error(ErrorCode::RankDeficientAfterDrop, what), drop(std::move(dropped)) {}
  std::vector<std::size_t> drop;
};

class SingularClusterBlockError : public Error {
 public:
  explicit SingularClusterBlockError(std::size_t g)
      : Error(ErrorCode::SingularClusterBlock,
              "I - P_Z[g,g] is numerically singular for cluster " + std::to_string(g) +
                  " (cluster leverage 1)"),
        cluster(g) {}
  std::size_t cluster;
};

class ParseErrorAt : public Error {
 public:
  ParseErrorAt(std::size_t r, std::string col, const std::string& what)
      : Error(ErrorCode::ParseError,
              "row " + std::to_string(r) + ", column '" + col + "': " + what),
        row(r),
        column(std::move(col)) {}
  std::size_t row;  // 1-based data row, header excluded
  std::string column;
};

class TooManyInstrumentsError : public Error {
 public:
  TooManyInstrumentsError(std::size_t k_, std::size_t G_)
      : Error(ErrorCode::TooManyInstruments,
              "k = " + std::to_string(k_) + " instruments requires more than k clusters, got G = " +
                  std::to_string(G_)),
        k(k_),
        G(G_) {}
  std::size_t k;
  std::size_t G;
};

}  // namespace clusteriv
