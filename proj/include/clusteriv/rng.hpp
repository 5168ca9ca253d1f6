#pragma once

// Reproducible random streams for simulation.
//
// Replication r of a run with base seed s draws from std::mt19937_64 seeded
// with splitmix64(s + 0x9E3779B97F4A7C15 * (r + 1)). Uniforms take the top 53
// bits of each 64-bit output, u = ((x >> 11) + 0.5) * 2^-53, and normals are
// -sqrt(2) erfc^{-1}(2u), one output per variate. Both the engine and the
// transforms are fully specified, so streams are identical across platforms
// and independent of how replications are scheduled.

#include <cstdint>
#include <random>

namespace clusteriv {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t stream_seed(std::uint64_t base_seed, std::uint64_t rep);

class NormalStream {
 public:
  explicit NormalStream(std::uint64_t seed) : eng_(seed) {}
  static NormalStream for_replication(std::uint64_t base_seed, std::uint64_t rep) {
    return NormalStream(stream_seed(base_seed, rep));
  }
  // In (0, 1), never 0 or 1.
  double uniform();
  double normal();

 private:
  std::mt19937_64 eng_;
};

}  // namespace clusteriv
