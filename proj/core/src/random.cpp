#include "cspd/random.hpp"

#include <cmath>

namespace cspd {

namespace {

// Ref: https://prng.di.unimi.it/splitmix64.c
std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t rotl(std::uint64_t x, int k) {
  return (x << k) | (x >> (64 - k));
}

} // namespace

RandomSource::RandomSource(std::uint64_t seed) : seed_(seed) {
  std::uint64_t sm = seed;
  for (auto& s : state_) s = splitmix64(sm);
}

RandomSource RandomSource::substream(std::string_view name) const {
  std::uint64_t mixed = seed_ ^ fnv1a(name);
  // One extra scramble so substream("x") of seed k differs from seed k^fnv("x").
  std::uint64_t sm = mixed;
  (void)splitmix64(sm);
  return RandomSource(splitmix64(sm));
}

RandomSource RandomSource::substream(std::string_view name, std::uint64_t index) const {
  std::uint64_t mixed = seed_ ^ fnv1a(name) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
  std::uint64_t sm = mixed;
  (void)splitmix64(sm);
  return RandomSource(splitmix64(sm));
}

// Ref: https://prng.di.unimi.it/xoshiro256plusplus.c
std::uint64_t RandomSource::next_bits() {
  const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = rotl(state_[3], 45);
  return result;
}

double RandomSource::uniform() {
  ++position_;
  return static_cast<double>(next_bits() >> 11) * 0x1.0p-53;
}

double RandomSource::normal() {
  // Box-Muller, cosine branch only: deterministic two-uniforms-per-normal.
  const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

Vec RandomSource::normal_vec(Eigen::Index d) {
  Vec v(d);
  for (Eigen::Index i = 0; i < d; ++i) v[i] = normal();
  return v;
}

} // namespace cspd
