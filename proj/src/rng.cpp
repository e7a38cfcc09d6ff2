#include "laga/rng.hpp"

#include <cmath>
#include <numbers>

namespace laga {

namespace {

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kSalt = 0x243F6A8885A308D3ull;

std::uint64_t mix(std::uint64_t z) {
  z += kGolden;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

}  // namespace

Rng::Rng(std::uint64_t seed) : stream_(mix(seed ^ kSalt)), counter_(0) {}

Rng Rng::restore(std::uint64_t stream, std::uint64_t counter) {
  Rng r;
  r.stream_ = stream;
  r.counter_ = counter;
  return r;
}

Rng Rng::child(std::string_view label) const {
  Rng r;
  r.stream_ = mix(stream_ ^ fnv1a(label));
  return r;
}

Rng Rng::child(std::uint64_t index) const {
  Rng r;
  r.stream_ = mix(stream_ + kGolden * (index + 1));
  return r;
}

std::uint64_t Rng::next_u64() { return mix(stream_ + kGolden * (++counter_)); }

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

double Rng::normal() {
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * std::numbers::pi * u2);
}

double Rng::normal(double mean, double stddev) {
  return mean + stddev * normal();
}

std::size_t Rng::index(std::size_t n) {
  // multiply-shift; bias is ~n/2^64, irrelevant at this scale
  return static_cast<std::size_t>(
      (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

}  // namespace laga
