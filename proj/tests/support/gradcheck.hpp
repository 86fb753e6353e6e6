#pragma once

// Central finite-difference oracle. Forward passes run in f32 like production
// code; the projection, differences and error norms are evaluated in f64.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mdrwkv/ops.hpp"
#include "mdrwkv/tensor.hpp"

namespace mdrwkv::testing {

struct GradCheckEntry {
  std::string name;
  double rel_error = 0.0;
  double analytic_norm = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, e.rel_error);
    return m;
  }
};

struct NamedInput {
  std::string name;
  Tensor tensor;
};

inline std::vector<float> uniform_values(std::size_t n, std::uint64_t seed, float lo = -1.0f,
                                         float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> dist(lo, hi);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f,
                            bool requires_grad = false) {
  auto n = numel(shape);
  return Tensor(std::move(shape), uniform_values(n, seed, lo, hi), requires_grad);
}

// Compares d/dx sum(r * f()) against central differences for every listed
// input, where r is a fixed random projection. Error is norm-wise:
// |analytic - numeric| / max(|analytic|, |numeric|).
inline GradCheckReport check_gradients(const std::function<Tensor()>& f,
                                       std::vector<NamedInput> inputs, double h = 1e-3,
                                       std::uint64_t seed = 99) {
  for (auto& in : inputs) in.tensor.zero_grad();
  Tensor out = f();
  const auto proj = uniform_values(out.numel(), seed);
  Tensor loss = sum(mul(out, Tensor(out.shape(), proj)));
  backward(loss);

  auto objective = [&]() {
    NoGradGuard guard;
    Tensor o = f();
    double acc = 0.0;
    for (std::size_t i = 0; i < o.numel(); ++i) acc += static_cast<double>(proj[i]) * o.data()[i];
    return acc;
  };

  GradCheckReport report;
  for (auto& in : inputs) {
    auto values = in.tensor.mutable_data();
    std::vector<double> analytic(values.size(), 0.0);
    if (in.tensor.has_grad()) {
      for (std::size_t i = 0; i < values.size(); ++i) analytic[i] = in.tensor.grad()[i];
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const float saved = values[i];
      const float plus = static_cast<float>(saved + h);
      const float minus = static_cast<float>(saved - h);
      values[i] = plus;
      const double lp = objective();
      values[i] = minus;
      const double lm = objective();
      values[i] = saved;
      const double numeric = (lp - lm) / (static_cast<double>(plus) - static_cast<double>(minus));
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      a2 += analytic[i] * analytic[i];
      n2 += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    report.entries.push_back({in.name, denom > 0.0 ? std::sqrt(diff2) / denom : 0.0, std::sqrt(a2)});
  }
  return report;
}

}  // namespace mdrwkv::testing
