#pragma once
// Named random substreams derived from one root seed, plus keyed uniforms
// for common-random-number simulations.

#include <cstdint>
#include <random>
#include <string_view>

namespace mint {

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t hash_name(std::string_view name) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : name) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// Seed for substream `name` (and optional index) under `root`.
inline uint64_t substream_seed(uint64_t root, std::string_view name, uint64_t index = 0) {
  return splitmix64(splitmix64(root ^ hash_name(name)) + splitmix64(index + 0x632be59bd9b4e019ULL));
}

inline std::mt19937_64 substream(uint64_t root, std::string_view name, uint64_t index = 0) {
  return std::mt19937_64(substream_seed(root, name, index));
}

// Deterministic uniform in [0,1) keyed by a tuple of integers.
inline double keyed_uniform(uint64_t seed, uint64_t a, uint64_t b, uint64_t c) {
  uint64_t h = splitmix64(seed);
  h = splitmix64(h ^ a);
  h = splitmix64(h ^ (b * 0x9e3779b97f4a7c15ULL));
  h = splitmix64(h ^ (c * 0xc2b2ae3d27d4eb4fULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace mint
