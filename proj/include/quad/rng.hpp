#pragma once

#include <cstdint>

#include "quad/tensor.hpp"

namespace quad {

// SplitMix64 stream. Every seeded value in the toolkit comes from here so runs
// reproduce across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Standard normal via Box-Muller; the second variate of each pair is cached.
  double normal();
  int64_t below(int64_t n) { return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n)); }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream seed from a parent seed and a salt.
uint64_t MixSeed(uint64_t seed, uint64_t salt);

Tensor RandomUniform(Shape shape, Rng& rng, float lo, float hi);
Tensor RandomNormal(Shape shape, Rng& rng, float stddev);

}  // namespace quad
