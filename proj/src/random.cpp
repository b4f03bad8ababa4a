#include "c2f/random.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace c2f {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t RandomStream::mix64(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// FNV-1a over the tag bytes.
std::uint64_t RandomStream::hash_tag(std::string_view tag) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : tag) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

std::uint64_t RandomStream::next_u64() {
  ++counter_;
  return mix64(seed_ + counter_ * kGolden);
}

double RandomStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t RandomStream::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("RandomStream::below: n must be > 0");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

double RandomStream::normal() {
  const double u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

int RandomStream::poisson(double rate) {
  if (rate <= 0.0) return 0;
  const double limit = std::exp(-rate);
  int k = 0;
  double p = uniform();
  while (p > limit) {
    ++k;
    p *= uniform();
  }
  return k;
}

RandomStream RandomStream::derive(std::uint64_t tag) const {
  return RandomStream(mix64(seed_ ^ mix64(tag)));
}

}  // namespace c2f
