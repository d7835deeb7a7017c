#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace casecohort {

// SplitMix64 output function. Used to derive decorrelated stream keys;
// never used as the generator itself.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Key for an independent stream identified by (seed, id_0, id_1, ...).
// Streams keyed this way are reproducible regardless of how work is
// scheduled across threads.
inline std::uint64_t stream_key(std::uint64_t seed,
                                std::initializer_list<std::uint64_t> ids) {
  std::uint64_t h = splitmix64(seed);
  for (std::uint64_t id : ids) h = splitmix64(h ^ splitmix64(id));
  return h;
}

// Deterministic random stream with hand-rolled samplers. The standard
// distribution objects are implementation-defined, so all sampling goes
// through the fixed algorithms below to make results stable across
// compilers and library versions.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : engine_(key) {}

  RngStream(std::uint64_t seed, std::initializer_list<std::uint64_t> ids)
      : engine_(stream_key(seed, ids)) {}

  // Uniform on [0, 1) with 53-bit resolution.
  double uniform01() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  bool bernoulli(double p) { return uniform01() < p; }

  // Strictly positive Exp(1) draw; -log1p(-u) maps [0,1) to [0, inf) and
  // the zero case (u == 0) is redrawn.
  double exponential() {
    for (;;) {
      double u = uniform01();
      if (u > 0.0) return -std::log1p(-u);
    }
  }

  // Standard normal via Box-Muller, caching the second draw of each pair.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * uniform01();
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace casecohort
