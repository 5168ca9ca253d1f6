#pragma once

// First-stage instrument strength under clustering.

#include "clusteriv/data.hpp"

#include <cstddef>
#include <string>

namespace clusteriv {

enum class FirstStageFlavor { Homoskedastic, Robust, Effective };
const char* to_string(FirstStageFlavor f);
FirstStageFlavor parse_first_stage_flavor(const std::string& s);

struct FirstStageReport {
  FirstStageFlavor flavor = FirstStageFlavor::Homoskedastic;
  double value = 0.0;
  bool infinite = false;  // first-stage residuals vanish
  std::size_t k = 0, p = 0, G = 0, n = 0;
};

// Homoskedastic: lambda_min(S^{-1/2}' X'P_Z X S^{-1/2}), S = eta'eta/(n-k).
// Robust (p = 1):    X'Z W2^{-1} Z'X / (n k).
// Effective (p = 1): X'P_Z X / tr(W2 (Z'Z/n)^{-1}).
// eta = M_Z X and W2 = sum_g Z_g'eta_g eta_g'Z_g / n.
FirstStageReport first_stage_f(const ClusteredDesign& d, FirstStageFlavor flavor);

// Cluster-robust covariance of Z'X/sqrt(n) from the first-stage residuals.
Matrix first_stage_w2(const ClusteredDesign& d);

}  // namespace clusteriv
