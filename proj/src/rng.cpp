#include "clusteriv/rng.hpp"

#include <boost/math/special_functions/erf.hpp>

#include <cmath>

namespace clusteriv {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t base_seed, std::uint64_t rep) {
  return splitmix64(base_seed + 0x9E3779B97F4A7C15ULL * (rep + 1));
}

double NormalStream::uniform() {
  return (static_cast<double>(eng_() >> 11) + 0.5) * 0x1.0p-53;
}

double NormalStream::normal() {
  return -std::sqrt(2.0) * boost::math::erfc_inv(2.0 * uniform());
}

}  // namespace clusteriv
