#pragma once

#include <cstdint>
#include <string_view>

namespace ps {

// xoshiro256++ with splitmix64 seeding. Self-contained so that seeded runs
// reproduce bit-for-bit regardless of the standard library in use.
class Rng {
public:
  explicit Rng(uint64_t seed);

  uint64_t next_u64();

  // Uniform in [0, 1).
  double next_double();

  // Uniform integer in [0, bound), rejection-sampled to remove modulo bias.
  uint64_t next_below(uint64_t bound);

  double uniform(double lo, double hi);

  // Standard normal via Box-Muller; draws two uniforms per pair of outputs.
  double normal();

private:
  uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Derives the seed of a named random stream from a root seed. Every consumer
// of randomness owns a distinct stream name, so adding a consumer never
// shifts the draws seen by the others.
uint64_t derive_stream_seed(uint64_t root_seed, std::string_view stream_name);

}  // namespace ps
