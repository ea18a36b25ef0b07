#pragma once

#include <cstdint>
#include <random>

namespace ngpu {

// Every random decision in a run is drawn from an mt19937_64 seeded through
// derive_seed(base, stream, ...), so runs are reproducible from a single seed
// and independent streams never interleave.

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
  uint64_t h = mix64(base + 0x243f6a8885a308d3ull);
  h = mix64(h ^ a);
  h = mix64(h ^ b);
  h = mix64(h ^ c);
  return h;
}

namespace stream {
inline constexpr uint64_t kInit = 1;
inline constexpr uint64_t kData = 2;
inline constexpr uint64_t kDropout = 3;
inline constexpr uint64_t kGradNoise = 4;
inline constexpr uint64_t kEvalUniform = 5;
inline constexpr uint64_t kEvalCarry = 6;
inline constexpr uint64_t kEvalStructured = 7;
}  // namespace stream

using Rng = std::mt19937_64;

}  // namespace ngpu
