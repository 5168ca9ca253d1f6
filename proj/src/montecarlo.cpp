#include "clusteriv/montecarlo.hpp"

#include "clusteriv/error.hpp"
#include "clusteriv/parallel.hpp"
#include "clusteriv/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace clusteriv {

void validate(const McConfig& c) {
  const auto bad = [](const std::string& what) {
    throw Error(ErrorCode::InvalidArgument, "simulation config: " + what);
  };
  if (c.G < 2) bad("need G >= 2");
  if (c.n < c.G) {
    throw Error(ErrorCode::InfeasibleSizes, "n = " + std::to_string(c.n) + " < G = " +
                                                std::to_string(c.G));
  }
  if (c.k < 1) bad("need k >= 1");
  if (!std::isfinite(c.gamma)) bad("gamma must be finite");
  if (!(c.zeta >= 0.0 && c.zeta < 1.0)) bad("zeta must lie in [0, 1)");
  if (!(c.rho >= 0.0 && c.rho <= 1.0)) bad("rho must lie in [0, 1]");
  if (!(c.h >= 0.0 && std::isfinite(c.h))) bad("h must be >= 0");
  if (!(c.R >= 0.0 && std::isfinite(c.R))) bad("R must be >= 0");
  if (!std::isfinite(c.beta0)) bad("beta0 must be finite");
  if (c.reps < 1) bad("need reps >= 1");
  if (!(c.alpha > 0.0 && c.alpha < 1.0)) bad("alpha must lie in (0, 1)");
}

ClusterSizesDetail cluster_sizes_detail(std::size_t n, std::size_t G, double gamma) {
  if (G < 1) throw Error(ErrorCode::InvalidArgument, "need G >= 1");
  if (n < G) {
    throw Error(ErrorCode::InfeasibleSizes, "n = " + std::to_string(n) + " < G = " +
                                                std::to_string(G));
  }
  const double dn = static_cast<double>(n);
  const double dG = static_cast<double>(G);
  double denom = 1.0;
  for (std::size_t g = 1; g < G; ++g) denom += std::exp(gamma * static_cast<double>(g) / dG);

  ClusterSizesDetail d;
  double sum = 0.0;
  for (std::size_t g = 1; g < G; ++g) {
    d.formula.push_back(std::max(1.0, dn * std::exp(gamma * static_cast<double>(g) / dG) / denom));
    sum += d.formula.back();
  }
  d.formula.push_back(std::max(1.0, dn - sum));
  for (double v : d.formula) d.floored.push_back(static_cast<std::size_t>(std::floor(v)));

  d.sizes = d.floored;
  std::size_t total = std::accumulate(d.sizes.begin(), d.sizes.end(), std::size_t{0});
  while (total > n) {
    // Largest cluster, last one on ties; it exceeds 1 because total > n >= G.
    std::size_t g = 0;
    for (std::size_t j = 1; j < G; ++j) {
      if (d.sizes[j] >= d.sizes[g]) g = j;
    }
    --d.sizes[g];
    --total;
  }
  for (std::size_t g = 0; total < n; g = (g + 1) % G) {
    ++d.sizes[g];
    ++total;
  }
  return d;
}

std::vector<std::size_t> cluster_sizes(std::size_t n, std::size_t G, double gamma) {
  return cluster_sizes_detail(n, G, gamma).sizes;
}

SimulatedData simulate_dataset(const McConfig& c, std::size_t rep) {
  validate(c);
  const auto sizes = cluster_sizes(c.n, c.G, c.gamma);
  const auto n = static_cast<Eigen::Index>(c.n);
  const auto k = static_cast<Eigen::Index>(c.k);
  const double sz = std::sqrt(c.zeta), sz1 = std::sqrt(1.0 - c.zeta);
  const double sr = std::sqrt(c.rho), sr1 = std::sqrt(1.0 - c.rho);

  SimulatedData out;
  SimulationTruth& t = out.truth;
  t.beta0 = c.beta0;
  t.Pi = Vector::Zero(k);
  t.Pi(0) = std::sqrt(c.R * std::sqrt(static_cast<double>(c.k)) / static_cast<double>(c.n));
  t.z_cl.resize(static_cast<Eigen::Index>(c.G), k);

  Matrix Z(n, k);
  Vector eta(n), eps(n);
  NormalStream rng = NormalStream::for_replication(c.base_seed, rep);
  Eigen::Index row = 0;
  for (std::size_t g = 0; g < c.G; ++g) {
    const auto gi = static_cast<Eigen::Index>(g);
    for (Eigen::Index j = 0; j < k; ++j) t.z_cl(gi, j) = rng.normal();
    const double eta_cl = rng.normal();
    const double w1 = rng.normal();
    const double mult = std::pow(std::abs(t.z_cl(gi, 0)), c.h);
    const double eps_cl = mult * (sr * eta_cl + sr1 * w1);
    for (std::size_t i = 0; i < sizes[g]; ++i, ++row) {
      for (Eigen::Index j = 0; j < k; ++j) Z(row, j) = sz * t.z_cl(gi, j) + sz1 * rng.normal();
      const double eta_ind = rng.normal();
      const double w2 = rng.normal();
      eta(row) = sz * eta_cl + sz1 * eta_ind;
      eps(row) = sz * eps_cl + sz1 * (sr * eta_ind + sr1 * w2);
    }

    const auto ng = static_cast<Eigen::Index>(sizes[g]);
    const Matrix J = Matrix::Ones(ng, ng);
    const Matrix I = Matrix::Identity(ng, ng);
    t.sigma.push_back(c.zeta * mult * mult * J + (1.0 - c.zeta) * I);
    t.omega.push_back(c.zeta * J + (1.0 - c.zeta) * I);
    t.xi.push_back(sr * (c.zeta * mult * J + (1.0 - c.zeta) * I));
  }

  Matrix X = Z * t.Pi + eta;
  Vector y = X.col(0) * c.beta0 + eps;
  out.design = make_design(std::move(y), std::move(X), std::move(Z),
                           ClusterBlocks::from_sizes(sizes));
  return out;
}

McMethod mc_method(const std::string& name) {
  const MethodConfig m = parse_method(name);
  McMethod out;
  out.name = name;
  out.run = [m](const ClusteredDesign& d, const std::vector<double>& betas, double alpha) {
    std::vector<RepResult> res(betas.size(), RepResult::Error);
    try {
      const PreparedTest test(d, m, alpha);
      for (std::size_t i = 0; i < betas.size(); ++i) {
        try {
          res[i] = test(Vector::Constant(1, betas[i])).reject ? RepResult::Reject
                                                              : RepResult::Accept;
        } catch (const std::exception&) {
        }
      }
    } catch (const std::exception&) {
    }
    return res;
  };
  return out;
}

std::vector<McMethod> mc_methods(const std::vector<std::string>& names) {
  std::vector<McMethod> out;
  for (const auto& nm : names) out.push_back(mc_method(nm));
  return out;
}

double RejectionRow::rate() const {
  return reps == 0 ? 0.0 : static_cast<double>(rejections) / static_cast<double>(reps);
}

double RejectionRow::se() const {
  if (reps == 0) return 0.0;
  const double r = rate();
  return std::sqrt(r * (1.0 - r) / static_cast<double>(reps));
}

namespace {

// results[rep][method][beta] -> rows appended for one key set.
void tally(const std::vector<std::vector<std::vector<RepResult>>>& results,
           const std::vector<McMethod>& methods, const std::vector<double>& keys,
           std::vector<std::vector<RejectionRow>>& rows_by_method) {
  for (std::size_t m = 0; m < methods.size(); ++m) {
    for (std::size_t b = 0; b < keys.size(); ++b) {
      RejectionRow row;
      row.method = methods[m].name;
      row.key = keys[b];
      for (const auto& rep : results) {
        switch (rep[m][b]) {
          case RepResult::Reject: ++row.rejections; ++row.reps; break;
          case RepResult::Accept: ++row.reps; break;
          case RepResult::Error: ++row.errors; break;
        }
      }
      rows_by_method[m].push_back(row);
    }
  }
}

std::vector<std::vector<std::vector<RepResult>>> run_reps(const McConfig& c,
                                                          const std::vector<McMethod>& methods,
                                                          const std::vector<double>& betas) {
  std::vector<std::vector<std::vector<RepResult>>> results(c.reps);
  parallel_for(c.reps, c.threads, [&](std::size_t r) {
    std::vector<std::vector<RepResult>> per_method(methods.size());
    try {
      const SimulatedData sim = simulate_dataset(c, r);
      for (std::size_t m = 0; m < methods.size(); ++m) {
        try {
          per_method[m] = methods[m].run(sim.design, betas, c.alpha);
        } catch (const std::exception&) {
        }
        per_method[m].resize(betas.size(), RepResult::Error);
      }
    } catch (const std::exception&) {
      for (auto& v : per_method) v.assign(betas.size(), RepResult::Error);
    }
    results[r] = std::move(per_method);
  });
  return results;
}

}  // namespace

RejectionTable size_experiment(const McConfig& c, const std::vector<McMethod>& methods,
                               const std::vector<std::size_t>& k_list) {
  validate(c);
  RejectionTable table;
  table.key_name = "k";
  table.config = c;
  std::vector<std::vector<RejectionRow>> rows(methods.size());
  for (std::size_t k : k_list) {
    McConfig ck = c;
    ck.k = k;
    validate(ck);
    const auto results = run_reps(ck, methods, {c.beta0});
    tally(results, methods, {static_cast<double>(k)}, rows);
  }
  for (auto& r : rows) table.rows.insert(table.rows.end(), r.begin(), r.end());
  return table;
}

RejectionTable power_experiment(const McConfig& c, const std::vector<McMethod>& methods,
                                const std::vector<double>& beta_grid) {
  validate(c);
  RejectionTable table;
  table.key_name = "beta";
  table.config = c;
  std::vector<std::vector<RejectionRow>> rows(methods.size());
  const auto results = run_reps(c, methods, beta_grid);
  tally(results, methods, beta_grid, rows);
  for (auto& r : rows) table.rows.insert(table.rows.end(), r.begin(), r.end());
  return table;
}

}  // namespace clusteriv
