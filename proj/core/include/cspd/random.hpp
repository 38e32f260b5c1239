#pragma once

#include <array>
#include <cstdint>
#include <string_view>

#include "cspd/numeric.hpp"

namespace cspd {

// Deterministic splittable RNG (splitmix64-seeded xoshiro256++). Identical
// seed + identical call sequence gives identical bits on every platform;
// normals use Box-Muller on our own uniforms so no libc distribution
// implementation leaks in. Substreams are pure functions of (seed, name):
// the parent's draw position never affects a child.
class RandomSource {
 public:
  explicit RandomSource(std::uint64_t seed);

  RandomSource substream(std::string_view name) const;
  RandomSource substream(std::string_view name, std::uint64_t index) const;

  double uniform();                 // [0, 1), 53-bit mantissa
  double normal();                  // N(0, 1)
  Vec normal_vec(Eigen::Index d);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t position() const { return position_; }  // draws consumed

 private:
  std::uint64_t next_bits();

  std::uint64_t seed_;
  std::array<std::uint64_t, 4> state_;
  std::uint64_t position_ = 0;
};

} // namespace cspd
