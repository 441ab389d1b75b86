#pragma once

// Deterministic stand-ins for the real datasets: digit-like stroke images in
// IDX layout and a Markov-chain token stream with learnable structure.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "yesbound/data.hpp"
#include "yesbound/rng.hpp"

namespace yesbound::synth {

struct Stroke {
  double x0, y0, x1, y1;
};

inline double segment_distance(double px, double py, const Stroke& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = s.x0 + t * dx - px, ey = s.y0 + t * dy - py;
  return std::sqrt(ex * ex + ey * ey);
}

struct DigitSet {
  std::vector<std::vector<unsigned char>> images;  // 784 bytes each
  std::vector<unsigned char> labels;
};

/// `n` 28x28 images over 10 classes. Each class has fixed prototype strokes;
/// samples jitter the endpoints, shift the glyph and add pixel noise.
inline DigitSet digits(std::size_t n, std::uint64_t seed) {
  constexpr int kSide = 28;
  Rng proto_rng = Rng(seed).derive(1);
  std::array<std::vector<Stroke>, 10> protos;
  for (auto& p : protos) {
    const int strokes = 3 + static_cast<int>(proto_rng.below(3));
    for (int s = 0; s < strokes; ++s) {
      p.push_back({proto_rng.uniform(6, 22), proto_rng.uniform(5, 23), proto_rng.uniform(6, 22),
                   proto_rng.uniform(5, 23)});
    }
  }
  Rng rng = Rng(seed).derive(2);
  DigitSet out;
  out.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<unsigned char>(rng.below(10));
    const double sx = rng.uniform(-2, 2), sy = rng.uniform(-2, 2);
    const double width = rng.uniform(1.0, 1.8);
    std::vector<Stroke> strokes = protos[label];
    for (auto& s : strokes) {
      s.x0 += sx + rng.normal();
      s.y0 += sy + rng.normal();
      s.x1 += sx + rng.normal();
      s.y1 += sy + rng.normal();
    }
    std::vector<unsigned char> img(kSide * kSide);
    for (int y = 0; y < kSide; ++y) {
      for (int x = 0; x < kSide; ++x) {
        double d = 1e9;
        for (const auto& s : strokes) d = std::min(d, segment_distance(x + 0.5, y + 0.5, s));
        double v = std::clamp(width + 0.5 - d, 0.0, 1.0) + 0.04 * rng.normal();
        img[static_cast<std::size_t>(y * kSide + x)] =
            static_cast<unsigned char>(std::lround(255.0 * std::clamp(v, 0.0, 1.0)));
      }
    }
    out.images.push_back(std::move(img));
    out.labels.push_back(label);
  }
  return out;
}

/// Token stream from a sparse first-order Markov chain: each token has a
/// handful of weighted successors, with occasional uniform jumps.
inline data::TokenIds markov_corpus(std::size_t n, Index vocab, std::uint64_t seed,
                                    int successors = 6, double jump = 0.1) {
  Rng table_rng = Rng(seed).derive(1);
  std::vector<std::vector<std::int32_t>> next(static_cast<std::size_t>(vocab));
  std::vector<std::vector<double>> cdf(static_cast<std::size_t>(vocab));
  for (Index t = 0; t < vocab; ++t) {
    double acc = 0.0;
    for (int k = 0; k < successors; ++k) {
      next[static_cast<std::size_t>(t)].push_back(
          static_cast<std::int32_t>(table_rng.below(static_cast<std::uint64_t>(vocab))));
      acc += 1.0 / (k + 1.0);  // Zipf-like weights
      cdf[static_cast<std::size_t>(t)].push_back(acc);
    }
    for (double& c : cdf[static_cast<std::size_t>(t)]) c /= acc;
  }
  Rng rng = Rng(seed).derive(2);
  data::TokenIds ids;
  ids.reserve(n);
  std::int32_t cur = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back(cur);
    if (rng.uniform() < jump) {
      cur = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
    } else {
      const auto& c = cdf[static_cast<std::size_t>(cur)];
      const double u = rng.uniform();
      const auto k = static_cast<std::size_t>(std::lower_bound(c.begin(), c.end(), u) - c.begin());
      cur = next[static_cast<std::size_t>(cur)][std::min(k, c.size() - 1)];
    }
  }
  return ids;
}

}  // namespace yesbound::synth
