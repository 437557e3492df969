#pragma once

#include <cstdint>
#include <random>

#include "robayes/tensor.hpp"

namespace robayes {

// Deterministic random stream. Built on std::mt19937_64 (whose output
// sequence is fixed by the standard) with explicit uniform/normal mappings,
// so identical seeds give identical draws on every platform and compiler.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

  // Stream derived from (seed, stream_id) by a splitmix64 combine; a pure
  // function of both, so parallel workers get decoupled draws.
  Rng(std::uint64_t seed, std::uint64_t stream_id) : Rng(mix(seed, stream_id)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // uniform on [0, 1) with 53-bit resolution
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  std::size_t uniform_index(std::size_t n);  // uniform on {0, ..., n-1}

  // standard normal via Box-Muller; spare value cached
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Tensor normal_tensor(Shape shape);

  Rng substream(std::uint64_t id) const { return Rng(seed_, id); }

  static std::uint64_t mix(std::uint64_t a, std::uint64_t b);

 private:
  std::uint64_t seed_ = 0;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace robayes
