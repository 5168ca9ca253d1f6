#include "clusteriv/distributions.hpp"

#include "clusteriv/error.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include <cmath>
#include <string>

namespace clusteriv {

namespace {

void require_dof(double dof) {
  if (!(dof > 0.0) || !std::isfinite(dof)) {
    throw Error(ErrorCode::InvalidArgument, "degrees of freedom must be positive");
  }
}

void require_prob(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "probability must lie in (0, 1), got " +
                                                std::to_string(p));
  }
}

}  // namespace

double chi2_cdf(double x, double dof) {
  require_dof(dof);
  if (!(x > 0.0)) return 0.0;
  if (std::isinf(x)) return 1.0;
  return boost::math::cdf(boost::math::chi_squared_distribution<double>(dof), x);
}

double chi2_sf(double x, double dof) {
  require_dof(dof);
  if (!(x > 0.0)) return 1.0;
  if (std::isinf(x)) return 0.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(dof), x));
}

double chi2_quantile(double prob, double dof) {
  require_dof(dof);
  require_prob(prob);
  return boost::math::quantile(boost::math::chi_squared_distribution<double>(dof), prob);
}

double normal_cdf(double x) {
  if (std::isinf(x)) return x > 0 ? 1.0 : 0.0;
  return boost::math::cdf(boost::math::normal_distribution<double>(), x);
}

double normal_sf(double x) {
  if (std::isinf(x)) return x > 0 ? 0.0 : 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::normal_distribution<double>(), x));
}

double normal_quantile(double prob) {
  require_prob(prob);
  return boost::math::quantile(boost::math::normal_distribution<double>(), prob);
}

}  // namespace clusteriv
