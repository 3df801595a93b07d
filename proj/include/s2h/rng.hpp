#pragma once

#include <cmath>
#include <cstdint>

namespace s2h {

// Counter-based splittable PRNG built on the splitmix64 finalizer. The i-th
// output is a pure function of (seed, i), so streams can be split, saved and
// restored with two integers and behave identically on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {}
  Rng(std::uint64_t seed, std::uint64_t counter) : seed_(seed), counter_(counter) {}

  static std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Derives an independent stream; children of distinct ids never collide
  // with the parent sequence.
  Rng split(std::uint64_t stream) const {
    return Rng(mix(seed_ ^ mix(stream + 0x632be59bd9b4e019ull)));
  }

  std::uint64_t next_u64() { return mix(seed_ + 0xd1b54a32d192ed03ull * ++counter_); }

  // Uniform in [0, 1), 53-bit resolution.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Box-Muller without caching: stateless apart from the counter.
  double next_gaussian() {
    double u1 = next_double();
    double u2 = next_double();
    while (u1 <= 0.0) u1 = next_double();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  // Uniform in [0, n); modulo bias is irrelevant for n << 2^64.
  std::uint64_t next_range(std::uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }
  void set_counter(std::uint64_t c) { counter_ = c; }

 private:
  std::uint64_t seed_ = 0;
  std::uint64_t counter_ = 0;
};

}  // namespace s2h
