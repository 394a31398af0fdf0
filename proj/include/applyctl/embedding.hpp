#pragma once

// Deterministic embedding stub: a hash-seeded unit vector blended with a topic
// direction, so that same-topic items are similar and the similarity structure can
// be scripted. Components are rounded to 1e-9 so the bank file round-trips exactly.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>
#include <vector>

#include "applyctl/random.hpp"

namespace applyctl {

inline double quantize_1e9(double v) { return std::round(v * 1e9) / 1e9; }

struct EmbeddingStub {
  std::size_t dim = 32;
  double topic_weight = 0.9;
  std::uint64_t seed = 0;

  std::vector<double> gaussian_direction(std::uint64_t key) const {
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < dim; ++i) {
      const double u1 = coin(seed, key, i, std::uint64_t{1});
      const double u2 = coin(seed, key, i, std::uint64_t{2});
      v[i] = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }
    normalize(v);
    return v;
  }

  std::vector<double> topic_direction(std::uint64_t topic) const {
    return gaussian_direction(coin_hash(0x70707069ULL, topic));
  }

  std::vector<double> embed(std::string_view key, std::uint64_t topic) const {
    const auto t = topic_direction(topic);
    const auto noise = gaussian_direction(coin_hash(0x6e6f6973ULL, key));
    const double w = topic_weight;
    const double r = std::sqrt(std::max(0.0, 1.0 - w * w));
    std::vector<double> v(dim);
    for (std::size_t i = 0; i < dim; ++i) v[i] = w * t[i] + r * noise[i];
    normalize(v);
    for (auto& x : v) x = quantize_1e9(x);
    return v;
  }

  static void normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0) {
      for (auto& x : v) x /= n;
    }
  }
};

}  // namespace applyctl
