#include "clusteriv/diagnostics.hpp"
#include "clusteriv/error.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace clusteriv;

namespace {

Matrix first_stage_resid(const ClusteredDesign& d) {
  return d.X - oracle::projection(d.Z) * d.X;
}

}  // namespace

TEST_CASE("W2 against an index loop") {
  std::mt19937_64 g(1);
  const ClusteredDesign d = oracle::random_design(g, {3, 2, 4, 1, 5, 2}, 2);
  const Matrix eta = first_stage_resid(d);
  Matrix W = Matrix::Zero(2, 2);
  const auto mem = d.blocks.membership();
  for (std::size_t i = 0; i < d.n(); ++i)
    for (std::size_t j = 0; j < d.n(); ++j)
      if (mem[i] == mem[j]) {
        const auto a = static_cast<Eigen::Index>(i), b = static_cast<Eigen::Index>(j);
        W += d.Z.row(a).transpose() * eta(a, 0) * eta(b, 0) * d.Z.row(b);
      }
  W /= static_cast<double>(d.n());
  CHECK(oracle::rel_err(first_stage_w2(d), W) < 1e-12);
}

TEST_CASE("singleton clusters give the White form") {
  std::mt19937_64 g(2);
  const ClusteredDesign d =
      with_singleton_clusters(oracle::random_design(g, {4, 3, 5, 2}, 3));
  const Matrix eta = first_stage_resid(d);
  Matrix W = Matrix::Zero(3, 3);
  for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(d.n()); ++i)
    W += d.Z.row(i).transpose() * d.Z.row(i) * eta(i, 0) * eta(i, 0);
  W /= static_cast<double>(d.n());
  CHECK(oracle::rel_err(first_stage_w2(d), W) < 1e-12);
}

TEST_CASE("homoskedastic F is the first-stage t squared at k = p = 1") {
  std::mt19937_64 g(3);
  const ClusteredDesign d = oracle::random_design(g, {4, 3, 5, 2, 6}, 1);
  const Vector z = d.Z.col(0), x = d.X.col(0);
  const double n = static_cast<double>(d.n());
  const double pi = z.dot(x) / z.squaredNorm();
  const double s2 = (x - pi * z).squaredNorm() / (n - 1.0);
  const double t = pi / std::sqrt(s2 / z.squaredNorm());
  const FirstStageReport r = first_stage_f(d, FirstStageFlavor::Homoskedastic);
  CHECK(oracle::rel_err(r.value, t * t) < 1e-10);
  CHECK_FALSE(r.infinite);
  CHECK(r.k == 1);
  CHECK(r.G == 5);
}

TEST_CASE("homoskedastic F with several regressors is a minimum eigenvalue") {
  std::mt19937_64 g(4);
  const ClusteredDesign d = oracle::random_design(g, {4, 3, 5, 2, 6, 4}, 3, 2);
  const Matrix eta = first_stage_resid(d);
  const Matrix S = eta.transpose() * eta / static_cast<double>(d.n() - 3);
  const Matrix A = d.X.transpose() * oracle::projection(d.Z) * d.X;
  // Generalised eigenproblem A v = lambda S v.
  Eigen::GeneralizedSelfAdjointEigenSolver<Matrix> es(A, S);
  const FirstStageReport r = first_stage_f(d, FirstStageFlavor::Homoskedastic);
  CHECK(oracle::rel_err(r.value, es.eigenvalues().minCoeff()) < 1e-10);
  CHECK(r.value >= 0.0);
}

TEST_CASE("robust and effective F") {
  std::mt19937_64 g(5);
  const ClusteredDesign d = oracle::random_design(g, {4, 3, 5, 2, 6, 4, 3}, 2);
  const double n = static_cast<double>(d.n());
  const Matrix W2 = first_stage_w2(d);
  const Vector zx = d.Z.transpose() * d.X.col(0);
  const FirstStageReport r = first_stage_f(d, FirstStageFlavor::Robust);
  CHECK(oracle::rel_err(r.value, zx.dot(W2.fullPivLu().solve(zx)) / (n * 2.0)) < 1e-10);

  const Matrix ZZ = d.Z.transpose() * d.Z / n;
  const double xpx = (d.X.transpose() * oracle::projection(d.Z) * d.X)(0, 0);
  const FirstStageReport e = first_stage_f(d, FirstStageFlavor::Effective);
  CHECK(oracle::rel_err(e.value, xpx / (ZZ.fullPivLu().solve(W2)).trace()) < 1e-10);

  SUBCASE("robust F is invariant to instrument rescaling") {
    ClusteredDesign s = d;
    s.Z.col(0) *= 1e3;
    s.Z.col(1) *= 0.25;
    CHECK(oracle::rel_err(first_stage_f(s, FirstStageFlavor::Robust).value, r.value) < 1e-8);
    CHECK(oracle::rel_err(first_stage_f(s, FirstStageFlavor::Effective).value, e.value) > 0.0);
  }
  SUBCASE("p > 1 is refused") {
    const ClusteredDesign two = oracle::random_design(g, {4, 3, 5, 2}, 3, 2);
    for (auto f : {FirstStageFlavor::Robust, FirstStageFlavor::Effective}) {
      try {
        first_stage_f(two, f);
        FAIL("expected UnsupportedDimension");
      } catch (const Error& err) {
        CHECK(err.code() == ErrorCode::UnsupportedDimension);
      }
    }
  }
}

TEST_CASE("noise-free first stage") {
  std::mt19937_64 g(6);
  ClusteredDesign d = oracle::random_design(g, {4, 3, 5, 2, 6}, 2);
  d.X = d.Z * Vector::Constant(2, 0.7);
  const FirstStageReport r = first_stage_f(d, FirstStageFlavor::Homoskedastic);
  CHECK(r.infinite);
  try {
    first_stage_f(d, FirstStageFlavor::Robust);
    FAIL("expected SingularW2");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::SingularW2);
  }
  CHECK(first_stage_f(d, FirstStageFlavor::Effective).infinite);
}

TEST_CASE("flavor names") {
  for (auto f : {FirstStageFlavor::Homoskedastic, FirstStageFlavor::Robust,
                 FirstStageFlavor::Effective})
    CHECK(parse_first_stage_flavor(to_string(f)) == f);
  CHECK_THROWS_AS(parse_first_stage_flavor("nope"), Error);
}
