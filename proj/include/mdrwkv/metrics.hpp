#pragma once

// Dice and HD95 on label maps, and per-class reports over a dataset.
//
// HD95 works on boundary pixels: region pixels with at least one 8-neighbour
// outside the region (the image border counts as outside). Each boundary pixel
// of one mask is paired with its nearest boundary pixel of the other; the
// result is the 95th percentile (linear interpolation between order
// statistics) of both directions pooled. Distances are in pixels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mdrwkv/data_io.hpp"
#include "mdrwkv/ops.hpp"
#include "mdrwkv/tensor.hpp"

namespace mdrwkv {

namespace detail {

inline void require_same_shape(const LabelMap& a, const LabelMap& b, const char* op) {
  if (a.height != b.height || a.width != b.width) {
    throw ShapeError(std::string(op) + ": masks " + std::to_string(a.height) + "x" + std::to_string(a.width) +
                     " and " + std::to_string(b.height) + "x" + std::to_string(b.width) + " differ");
  }
}

inline std::vector<std::uint8_t> boundary(const LabelMap& m, int cls) {
  const auto H = static_cast<long>(m.height), W = static_cast<long>(m.width);
  std::vector<std::uint8_t> out(m.size(), 0);
  for (long y = 0; y < H; ++y)
    for (long x = 0; x < W; ++x) {
      if (m.labels[y * W + x] != cls) continue;
      bool edge = false;
      for (long dy = -1; dy <= 1 && !edge; ++dy)
        for (long dx = -1; dx <= 1 && !edge; ++dx) {
          const long ny = y + dy, nx = x + dx;
          edge = ny < 0 || nx < 0 || ny >= H || nx >= W || m.labels[ny * W + nx] != cls;
        }
      out[y * W + x] = edge;
    }
  return out;
}

// Exact squared Euclidean distance to the nearest site (lower envelope of
// parabolas, one row or column at a time). Non-site entries are +inf on input.
inline void distance_transform_1d(const double* f, std::size_t n, std::size_t stride, double* out,
                                  std::vector<std::size_t>& v, std::vector<double>& z) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.clear();
  z.clear();
  for (std::size_t q = 0; q < n; ++q) {
    const double fq = f[q * stride];
    if (fq == inf) continue;
    const double dq = static_cast<double>(q);
    while (!v.empty()) {
      const double p = static_cast<double>(v.back());
      const double s = ((fq + dq * dq) - (f[v.back() * stride] + p * p)) / (2.0 * dq - 2.0 * p);
      if (s <= z.back()) {
        v.pop_back();
        z.pop_back();
      } else {
        z.push_back(s);
        break;
      }
    }
    if (v.empty()) z.assign(1, -inf);
    v.push_back(q);
  }
  if (v.empty()) {
    for (std::size_t q = 0; q < n; ++q) out[q * stride] = inf;
    return;
  }
  std::size_t k = 0;
  for (std::size_t q = 0; q < n; ++q) {
    const double dq = static_cast<double>(q);
    while (k + 1 < v.size() && z[k + 1] < dq) ++k;
    const double d = dq - static_cast<double>(v[k]);
    out[q * stride] = d * d + f[v[k] * stride];
  }
}

inline std::vector<double> squared_distance_to(const std::vector<std::uint8_t>& sites, std::size_t H,
                                               std::size_t W) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> f(sites.size()), tmp(sites.size()), out(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) f[i] = sites[i] ? 0.0 : inf;
  std::vector<std::size_t> v;
  std::vector<double> z;
  for (std::size_t x = 0; x < W; ++x) distance_transform_1d(f.data() + x, H, W, tmp.data() + x, v, z);
  for (std::size_t y = 0; y < H; ++y) distance_transform_1d(tmp.data() + y * W, W, 1, out.data() + y * W, v, z);
  return out;
}

}  // namespace detail

// numpy's default ("linear") percentile of an ascending-sorted sample.
inline double percentile_linear(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw std::invalid_argument("percentile of empty set");
  const double pos = q / 100.0 * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

// 2|P & G| / (|P| + |G|); 1 when the class is absent from both.
inline double dice_score(const LabelMap& pred, const LabelMap& gt, int cls) {
  detail::require_same_shape(pred, gt, "dice_score");
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred.labels[i] == cls, b = gt.labels[i] == cls;
    p += a;
    g += b;
    both += a && b;
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

// Undefined when exactly one side is empty; 0 when both are.
inline std::optional<double> hd95(const LabelMap& pred, const LabelMap& gt, int cls) {
  detail::require_same_shape(pred, gt, "hd95");
  const auto bp = detail::boundary(pred, cls);
  const auto bg = detail::boundary(gt, cls);
  const bool ep = std::find(bp.begin(), bp.end(), 1) == bp.end();
  const bool eg = std::find(bg.begin(), bg.end(), 1) == bg.end();
  if (ep && eg) return 0.0;
  if (ep || eg) return std::nullopt;
  const auto to_g = detail::squared_distance_to(bg, gt.height, gt.width);
  const auto to_p = detail::squared_distance_to(bp, gt.height, gt.width);
  std::vector<double> d;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) d.push_back(std::sqrt(to_g[i]));
    if (bg[i]) d.push_back(std::sqrt(to_p[i]));
  }
  std::sort(d.begin(), d.end());
  return percentile_linear(d, 95.0);
}

// Per-pixel argmax over classes of logits or probabilities [B, K, H, W].
inline std::vector<LabelMap> argmax_labels(const Tensor& scores) {
  const detail::Dims4 d(scores.shape());
  std::vector<LabelMap> out;
  for (std::size_t b = 0; b < d.b; ++b) {
    LabelMap m(d.h, d.w);
    for (std::size_t p = 0; p < d.plane(); ++p) {
      std::size_t best = 0;
      float bv = scores.data()[(b * d.c) * d.plane() + p];
      for (std::size_t c = 1; c < d.c; ++c) {
        const float v = scores.data()[(b * d.c + c) * d.plane() + p];
        if (v > bv) {
          bv = v;
          best = c;
        }
      }
      m.labels[p] = static_cast<std::uint8_t>(best);
    }
    out.push_back(std::move(m));
  }
  return out;
}

// Compensated running sum.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - c_;
    const double t = sum_ + y;
    c_ = (t - sum_) - y;
    sum_ = t;
    ++n_;
  }
  double sum() const { return sum_; }
  std::size_t count() const { return n_; }
  std::optional<double> mean() const {
    if (n_ == 0) return std::nullopt;
    return sum_ / static_cast<double>(n_);
  }

 private:
  double sum_ = 0.0, c_ = 0.0;
  std::size_t n_ = 0;
};

struct ClassMetrics {
  int cls = 0;
  double dice = 0.0;
  std::optional<double> hd95;  // mean over samples where defined
  std::size_t hd95_samples = 0;
};

// Rows for foreground classes 1..K-1; means over those rows.
struct MetricsReport {
  std::size_t num_classes = 0;
  std::size_t samples = 0;
  std::vector<ClassMetrics> classes;
  double mean_dice = 0.0;
  std::optional<double> mean_hd95;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["num_classes"] = num_classes;
    j["samples"] = samples;
    j["classes"] = nlohmann::ordered_json::array();
    for (const auto& c : classes) {
      nlohmann::ordered_json row{{"class", c.cls}, {"dice", c.dice}};
      row["hd95"] = c.hd95 ? nlohmann::ordered_json(*c.hd95) : nlohmann::ordered_json(nullptr);
      row["hd95_samples"] = c.hd95_samples;
      j["classes"].push_back(row);
    }
    j["mean_dice"] = mean_dice;
    j["mean_hd95"] = mean_hd95 ? nlohmann::ordered_json(*mean_hd95) : nlohmann::ordered_json(nullptr);
    return j;
  }

  std::string to_text() const {
    std::ostringstream os;
    os << std::left << std::setw(8) << "class" << std::right << std::setw(10) << "DSC" << std::setw(10) << "HD95"
       << '\n';
    auto hd = [](const std::optional<double>& v) {
      std::ostringstream s;
      if (v) s << std::fixed << std::setprecision(2) << *v;
      else s << "n/a";
      return s.str();
    };
    for (const auto& c : classes) {
      os << std::left << std::setw(8) << c.cls << std::right << std::setw(10) << std::fixed << std::setprecision(4)
         << c.dice << std::setw(10) << hd(c.hd95) << '\n';
    }
    os << std::left << std::setw(8) << "mean" << std::right << std::setw(10) << std::fixed << std::setprecision(4)
       << mean_dice << std::setw(10) << hd(mean_hd95) << '\n';
    return os.str();
  }
};

// Accumulates per-sample scores and produces a report.
class MetricsAccumulator {
 public:
  explicit MetricsAccumulator(std::size_t num_classes) : k_(num_classes), dice_(num_classes), hd_(num_classes) {}

  void add(const LabelMap& pred, const LabelMap& gt) {
    for (std::size_t c = 1; c < k_; ++c) {
      dice_[c].add(dice_score(pred, gt, static_cast<int>(c)));
      if (auto h = hd95(pred, gt, static_cast<int>(c))) hd_[c].add(*h);
    }
    ++samples_;
  }

  MetricsReport report() const {
    MetricsReport r;
    r.num_classes = k_;
    r.samples = samples_;
    KahanSum md, mh;
    for (std::size_t c = 1; c < k_; ++c) {
      ClassMetrics row;
      row.cls = static_cast<int>(c);
      row.dice = dice_[c].mean().value_or(0.0);
      row.hd95 = hd_[c].mean();
      row.hd95_samples = hd_[c].count();
      if (dice_[c].count()) md.add(row.dice);
      if (row.hd95) mh.add(*row.hd95);
      r.classes.push_back(row);
    }
    r.mean_dice = md.mean().value_or(0.0);
    r.mean_hd95 = mh.mean();
    return r;
  }

 private:
  std::size_t k_;
  std::size_t samples_ = 0;
  std::vector<KahanSum> dice_, hd_;
};

// predict: images [B, C, S, S] -> class scores [B, K, S, S]. The dataset needs
// size() and get(i) returning a Sample.
template <class Predict, class DatasetT>
MetricsReport evaluate(Predict&& predict, const DatasetT& data, std::size_t num_classes,
                       std::size_t batch_size = 8) {
  MetricsAccumulator acc(num_classes);
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<Sample> batch;
    for (std::size_t i = start; i < std::min(start + batch_size, data.size()); ++i) batch.push_back(data.get(i));
    const auto images = make_batch(batch).first;
    const auto preds = argmax_labels(predict(images));
    for (std::size_t i = 0; i < batch.size(); ++i) acc.add(preds[i], batch[i].mask);
  }
  return acc.report();
}

}  // namespace mdrwkv
