#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string_view>

#include "jl1/errors.hpp"

namespace jl1 {

// 64-bit FNV-1a of a string, used to derive named substreams.
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Stateless mixer (splitmix64 finalizer); good avalanche, cheap.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic random source. std::mt19937_64 has a fixed, portable
// algorithm, but the std distributions do not, so every distribution
// here is hand-rolled to keep byte-identical streams across platforms
// and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform double in [0, 1) with 53 random bits.
  double next_unit() { return (next_u64() >> 11) * 0x1.0p-53; }

  float next_unit_f() { return static_cast<float>(next_unit()); }

  // Uniform integer in [0, n). Lemire multiply-shift; the bias for any
  // n that fits in 32 bits is below 2^-32, far under what any test in
  // this project can resolve.
  std::uint64_t next_below(std::uint64_t n) {
    if (n == 0) throw contract_error("Rng::next_below: n must be positive");
    using u128 = unsigned __int128;
    return static_cast<std::uint64_t>((static_cast<u128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller. Draws two uniforms per call and
  // keeps no cached spare, so the stream position is a pure function
  // of the call count.
  double next_normal() {
    double u1 = 1.0 - next_unit();  // (0, 1], keeps log() finite
    double u2 = next_unit();
    return std::sqrt(-2.0 * std::log(u1)) *
           std::cos(2.0 * std::numbers::pi * u2);
  }

  // Uniform double in [lo, hi).
  double next_range(double lo, double hi) {
    return lo + (hi - lo) * next_unit();
  }

  template <typename T>
  void fill_normal(std::span<T> out, double mean = 0.0, double stddev = 1.0) {
    for (auto& v : out) v = static_cast<T>(mean + stddev * next_normal());
  }

  template <typename T>
  void fill_unit(std::span<T> out) {
    for (auto& v : out) v = static_cast<T>(next_unit());
  }

 private:
  std::mt19937_64 eng_;
};

// Derives an independent named substream from a root seed. Streams with
// different (name, counter) pairs are decorrelated by construction, and
// the derivation is stateless: any stream can be re-created at any time
// from (seed, name, counter) alone, which is what makes training runs
// resumable without serializing generator state.
inline Rng substream(std::uint64_t seed, std::string_view name,
                     std::uint64_t counter = 0) {
  std::uint64_t s = mix64(seed ^ fnv1a64(name));
  s = mix64(s ^ (counter * 0x9e3779b97f4a7c15ull + 0x632be59bd9b4e019ull));
  return Rng(s);
}

}  // namespace jl1
