#pragma once

// All-pairs HD95 reference. Deliberately shares nothing with metrics.hpp but
// the LabelMap type: boundary extraction and the percentile rule are restated.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <utility>
#include <vector>

#include "mdrwkv/data_io.hpp"

namespace mdrwkv {

inline std::optional<double> hd95_oracle(const LabelMap& pred, const LabelMap& gt, int cls) {
  auto edge_pixels = [cls](const LabelMap& m) {
    std::vector<std::pair<long, long>> pts;
    const long H = static_cast<long>(m.height), W = static_cast<long>(m.width);
    auto in = [&](long y, long x) { return y >= 0 && x >= 0 && y < H && x < W && m.labels[y * W + x] == cls; };
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x) {
        if (!in(y, x)) continue;
        const bool interior = in(y - 1, x - 1) && in(y - 1, x) && in(y - 1, x + 1) && in(y, x - 1) &&
                              in(y, x + 1) && in(y + 1, x - 1) && in(y + 1, x) && in(y + 1, x + 1);
        if (!interior) pts.emplace_back(y, x);
      }
    return pts;
  };
  const auto a = edge_pixels(pred), b = edge_pixels(gt);
  if (a.empty() && b.empty()) return 0.0;
  if (a.empty() || b.empty()) return std::nullopt;

  auto nearest = [](std::pair<long, long> p, const std::vector<std::pair<long, long>>& set) {
    long best = std::numeric_limits<long>::max();
    for (auto q : set) {
      const long dy = p.first - q.first, dx = p.second - q.second;
      best = std::min(best, dy * dy + dx * dx);
    }
    return std::sqrt(static_cast<double>(best));
  };
  std::vector<double> d;
  for (auto p : a) d.push_back(nearest(p, b));
  for (auto q : b) d.push_back(nearest(q, a));
  std::sort(d.begin(), d.end());

  const double rank = 0.95 * static_cast<double>(d.size() - 1);
  const auto i = static_cast<std::size_t>(rank);
  if (i + 1 >= d.size()) return d.back();
  return d[i] + (d[i + 1] - d[i]) * (rank - static_cast<double>(i));
}

}  // namespace mdrwkv
