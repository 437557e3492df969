#include "robayes/rng.hpp"

#include <cmath>

namespace robayes {

namespace {
std::uint64_t splitmix64(std::uint64_t& state) {
  state += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace

std::uint64_t Rng::mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t state = a;
  std::uint64_t h = splitmix64(state);
  state ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return splitmix64(state);
}

std::size_t Rng::uniform_index(std::size_t n) {
  // rejection sampling keeps the draw exactly uniform
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform01();
  while (u1 <= 0.0) u1 = uniform01();
  const double u2 = uniform01();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double two_pi = 6.283185307179586476925286766559;
  spare_ = r * std::sin(two_pi * u2);
  has_spare_ = true;
  return r * std::cos(two_pi * u2);
}

Tensor Rng::normal_tensor(Shape shape) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = normal();
  return t;
}

}  // namespace robayes
