#pragma once

namespace clusteriv {

// Thin wrappers over Boost.Math so the rest of the library never touches
// distribution objects or policies directly.
double chi2_cdf(double x, double dof);
// Upper tail 1 - F(x), accurate for large x.
double chi2_sf(double x, double dof);
double chi2_quantile(double prob, double dof);
double normal_cdf(double x);
double normal_sf(double x);
double normal_quantile(double prob);

}  // namespace clusteriv
