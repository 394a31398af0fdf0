#pragma once

// Portable deterministic randomness.
//
// std::mt19937_64 is bit-specified by the standard, but the std distributions are
// not, so bounded integers and unit uniforms are derived here by hand. Counter-style
// coins (hash of a seed and a tuple of tags) are used by the simulator so that an
// outcome never depends on evaluation order.

#include <cstdint>
#include <limits>
#include <random>
#include <string_view>

namespace applyctl {

constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t fnv1a64(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {
constexpr std::uint64_t fold(std::uint64_t h, std::uint64_t v) noexcept { return mix64(h ^ mix64(v)); }
constexpr std::uint64_t to_u64(std::uint64_t v) noexcept { return v; }
inline std::uint64_t to_u64(std::string_view s) noexcept { return fnv1a64(s); }
}  // namespace detail

// Hash a seed together with any number of integer or string tags.
template <class... Tags>
std::uint64_t coin_hash(std::uint64_t seed, const Tags&... tags) {
  std::uint64_t h = mix64(seed);
  ((h = detail::fold(h, detail::to_u64(tags))), ...);
  return h;
}

// Uniform in the open interval (0, 1); safe to feed into quantile functions.
constexpr double open_unit(std::uint64_t h) noexcept {
  return (static_cast<double>(h >> 11) + 0.5) * 0x1.0p-53;
}

template <class... Tags>
double coin(std::uint64_t seed, const Tags&... tags) {
  return open_unit(coin_hash(seed, tags...));
}

// Unbiased integer in [0, n) from a 64-bit engine (Lemire's multiply-and-reject).
inline std::uint64_t bounded_index(std::mt19937_64& eng, std::uint64_t n) {
  if (n == 0) return 0;
  using u128 = unsigned __int128;
  u128 m = static_cast<u128>(eng()) * n;
  auto low = static_cast<std::uint64_t>(m);
  if (low < n) {
    const std::uint64_t threshold = (0 - n) % n;
    while (low < threshold) {
      m = static_cast<u128>(eng()) * n;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

inline double unit_uniform(std::mt19937_64& eng) { return open_unit(eng()); }

// Fisher-Yates with the portable index draw above.
template <class RandomIt>
void portable_shuffle(RandomIt first, RandomIt last, std::mt19937_64& eng) {
  const auto n = static_cast<std::uint64_t>(last - first);
  for (std::uint64_t i = n; i > 1; --i) {
    const auto j = bounded_index(eng, i);
    std::swap(first[i - 1], first[j]);
  }
}

}  // namespace applyctl
