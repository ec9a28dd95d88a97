#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "mscrack/tensor.hpp"

namespace mscrack {

std::uint64_t splitmix64(std::uint64_t x);

// Deterministic stream keyed by (seed, name, index...). All draws are derived
// from raw 64-bit engine output so results do not depend on the standard
// library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}
  Rng(std::uint64_t seed, std::string_view stream, std::uint64_t index = 0);

  std::uint64_t next_u64() { return engine_(); }
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform in [0, n).
  std::uint64_t below(std::uint64_t n);
  bool bernoulli(double p) { return uniform() < p; }
  double normal();

  std::string state() const;
  void set_state(const std::string& s);

 private:
  std::mt19937_64 engine_;
};

Tensor uniform_tensor(Shape shape, Rng& rng, double lo, double hi);
Tensor normal_tensor(Shape shape, Rng& rng, double stddev);

}  // namespace mscrack
