#pragma once

// Seeded random streams. Every random draw in the library is addressed by a
// tuple (seed, stream, index...) so results do not depend on evaluation order.

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>

#include "ssm/tensor.hpp"

namespace ssm {

/// SplitMix64: small counter-based generator, cheap to construct per stream.
/// Satisfies UniformRandomBitGenerator so it plugs into <random>
/// distributions.
class SplitMix64 {
 public:
  using result_type = std::uint64_t;

  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() {
    return std::numeric_limits<result_type>::max();
  }

  result_type operator()() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Combine a seed with stream coordinates into a well-mixed 64-bit seed.
inline std::uint64_t mix_seed(std::uint64_t seed,
                              std::initializer_list<std::uint64_t> coords) {
  SplitMix64 g(seed ^ 0x6A09E667F3BCC909ULL);
  std::uint64_t h = g();
  for (std::uint64_t c : coords) {
    SplitMix64 step(h ^ (c + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2)));
    h = step();
  }
  return h;
}

/// Independent stream for the given coordinates.
inline SplitMix64 make_stream(std::uint64_t seed,
                              std::initializer_list<std::uint64_t> coords) {
  return SplitMix64(mix_seed(seed, coords));
}

/// Matrix of i.i.d. N(0, 1) entries; row r drawn from stream (seed, tag, r).
inline Matrix standard_normal(Index rows, Index cols, std::uint64_t seed,
                              std::uint64_t tag) {
  Matrix out(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    SplitMix64 g = make_stream(seed, {tag, static_cast<std::uint64_t>(r)});
    std::normal_distribution<double> normal;
    for (Index c = 0; c < cols; ++c) out(r, c) = normal(g);
  }
  return out;
}

}  // namespace ssm
