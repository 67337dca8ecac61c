#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string_view>

namespace mulab::rng {

inline constexpr uint64_t kFnvOffset = 1469598103934665603ull;
inline constexpr uint64_t kFnvPrime = 1099511628211ull;

constexpr uint64_t fnv1a(std::string_view s, uint64_t h = kFnvOffset) {
  for (unsigned char c : s) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

inline uint64_t fnv1a_bytes(const void* data, size_t n, uint64_t h = kFnvOffset) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
  return h;
}

// splitmix64 finalizer; full 64-bit avalanche.
constexpr uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Counter-based random stream keyed by (seed, name). Every draw is a pure
// function of (key, index), so consumers can sample coordinates in any order
// and still reproduce the same values bit for bit.
struct Stream {
  uint64_t key = 0;

  static Stream keyed(uint64_t seed, std::string_view name) {
    return Stream{mix64(mix64(seed) ^ fnv1a(name))};
  }
  // Sub-stream for e.g. per-epoch permutations.
  Stream fork(uint64_t lane) const { return Stream{mix64(key ^ mix64(lane + 0x632be59bd9b4e019ull))}; }

  uint64_t u64_at(uint64_t i) const { return mix64(key ^ mix64(i)); }

  // Uniform in (0, 1]; never returns 0 so it is safe under log().
  double unit_at(uint64_t i) const {
    return static_cast<double>((u64_at(i) >> 11) + 1) * 0x1.0p-53;
  }

  // Standard normal via Box-Muller on the (2i, 2i+1) uniform pair.
  double normal_at(uint64_t i) const {
    const double u1 = unit_at(2 * i);
    const double u2 = unit_at(2 * i + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n), n > 0. Multiply-high map; bias is O(n/2^64).
  uint64_t index_below(uint64_t i, uint64_t n) const {
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(u64_at(i)) * n) >> 64);
  }
};

// In-place Fisher-Yates driven by a counter stream; deterministic on every
// platform (no std::uniform_int_distribution).
template <typename T>
void shuffle(std::span<T> items, Stream s) {
  const uint64_t n = items.size();
  if (n < 2) return;
  for (uint64_t i = 0; i + 1 < n; ++i) {
    const uint64_t j = i + s.index_below(i, n - i);
    std::swap(items[i], items[j]);
  }
}

}  // namespace mulab::rng
