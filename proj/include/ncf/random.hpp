#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

#include "ncf/common.hpp"

namespace ncf {

/// Counter-based generator: draw k of stream s under seed is a pure function
/// of (seed, s, k), so results do not depend on call order across streams.
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t seed, std::uint64_t stream = 0)
      : seed_(seed), stream_(stream) {}

  std::uint64_t next_u64() { return hash(seed_, stream_, counter_++); }

  /// Uniform in the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via Box-Muller; one normal per two uniforms.
  double normal() {
    const double r = std::sqrt(-2.0 * std::log(uniform()));
    const double theta = 2.0 * std::numbers::pi * uniform();
    return r * std::cos(theta);
  }

  Vec normal_vector(Index k, double stddev = 1.0) {
    Vec out(k);
    for (Index i = 0; i < k; ++i) out[i] = stddev * normal();
    return out;
  }

  /// Uniform draw on the unit sphere S^{k-1}.
  Vec unit_vector(Index k) {
    Vec out = normal_vector(k);
    double n = out.norm();
    while (n == 0.0) {
      out = normal_vector(k);
      n = out.norm();
    }
    return out / n;
  }

  std::uint64_t counter() const { return counter_; }

  static std::uint64_t hash(std::uint64_t seed, std::uint64_t stream,
                            std::uint64_t counter) {
    std::uint64_t x = splitmix(seed ^ 0x9e3779b97f4a7c15ULL);
    x = splitmix(x ^ stream);
    return splitmix(x ^ counter);
  }

 private:
  static std::uint64_t splitmix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t counter_ = 0;
};

}  // namespace ncf
