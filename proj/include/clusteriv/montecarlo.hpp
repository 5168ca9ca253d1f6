#pragma once

// Simulation design with clustered instruments and errors, and size and power
// experiments over it.

#include "clusteriv/data.hpp"
#include "clusteriv/inference.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace clusteriv {

struct McConfig {
  std::size_t n = 1000;
  std::size_t G = 100;
  double gamma = 6.0;  // cluster size imbalance, 0 = balanced
  double zeta = 0.3;   // within-cluster dependence, in [0, 1)
  double rho = 0.3;    // endogeneity, in [0, 1]
  double h = 1.0;      // heteroskedasticity exponent
  double R = 10.0;     // instrument relevance, Pi_1 = sqrt(R sqrt(k) / n)
  std::size_t k = 1;
  double beta0 = 0.0;
  std::size_t reps = 2000;
  std::uint64_t base_seed = 1;
  double alpha = 0.05;
  std::size_t threads = 1;
};

// Throws InvalidArgument (or InfeasibleSizes when n < G) for a bad config.
void validate(const McConfig& c);

struct ClusterSizesDetail {
  std::vector<double> formula;       // before rounding down
  std::vector<std::size_t> floored;  // before the top-up
  std::vector<std::size_t> sizes;    // final, summing to n
};

// Exponential size profile. If the floored sizes already exceed n (tiny n/G),
// the currently largest cluster (last on ties) is decremented until they fit.
ClusterSizesDetail cluster_sizes_detail(std::size_t n, std::size_t G, double gamma);
std::vector<std::size_t> cluster_sizes(std::size_t n, std::size_t G, double gamma);

// Known conditional (on the cluster-common instrument draws) moments.
struct SimulationTruth {
  double beta0 = 0.0;
  Vector Pi;                  // k
  Matrix z_cl;                // G x k cluster-common instrument components
  std::vector<Matrix> sigma;  // E(eps_g eps_g')
  std::vector<Matrix> omega;  // E(eta_g eta_g')
  std::vector<Matrix> xi;     // E(eta_g eps_g')
};

struct SimulatedData {
  ClusteredDesign design;
  SimulationTruth truth;
};

// Replication rep of the design. Draw order per cluster: z_cl (k), eta_cl,
// w1; then per observation: z_ind (k), eta_ind, w2.
SimulatedData simulate_dataset(const McConfig& c, std::size_t rep);

enum class RepResult : std::int8_t { Accept, Reject, Error };

// A test run on one simulated dataset at each hypothesised beta. Must be safe
// to call concurrently.
struct McMethod {
  std::string name;
  std::function<std::vector<RepResult>(const ClusteredDesign&, const std::vector<double>& betas,
                                       double alpha)>
      run;
};

// Built-in methods by name (see parse_method).
McMethod mc_method(const std::string& name);
std::vector<McMethod> mc_methods(const std::vector<std::string>& names);

struct RejectionRow {
  std::string method;
  double key = 0.0;            // k or beta*
  std::size_t rejections = 0;
  std::size_t reps = 0;        // replications that produced a decision
  std::size_t errors = 0;      // replications where the test failed
  double rate() const;
  double se() const;           // sqrt(rate (1 - rate) / reps)
};

struct RejectionTable {
  std::string key_name;  // "k" or "beta"
  McConfig config;
  std::vector<RejectionRow> rows;  // method-major, keys in input order
};

// Rejection of H0: beta = beta0 for each k in k_list.
RejectionTable size_experiment(const McConfig& c, const std::vector<McMethod>& methods,
                               const std::vector<std::size_t>& k_list);
// Data at c.beta0; tests of H0: beta = beta* for each beta* in the grid.
RejectionTable power_experiment(const McConfig& c, const std::vector<McMethod>& methods,
                                const std::vector<double>& beta_grid);

}  // namespace clusteriv
