#pragma once

// Dice + cross-entropy loss, AdamW with a per-step cosine schedule, global
// gradient clipping, flip test-time augmentation and the training loop.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdrwkv/data_io.hpp"
#include "mdrwkv/network.hpp"
#include "mdrwkv/ops.hpp"
#include "mdrwkv/random.hpp"
#include "mdrwkv/tensor.hpp"

namespace mdrwkv {

inline constexpr double kDiceSmooth = 1e-5;

struct LossParts {
  double ce = 0.0;    // mean over pixels
  double dice = 0.0;  // mean soft Dice over all K classes
  double total() const { return 0.5 * ce + 0.5 * (1.0 - dice); }
};

namespace detail {

struct LossEval {
  LossParts parts;
  std::vector<float> grad;  // d total / d logits
};

inline LossEval dice_ce(const Tensor& logits, const Tensor& target, bool with_grad) {
  require_rank(logits, 4, "dice_ce_loss");
  const Dims4 d(logits.shape());
  if (target.rank() != 3 || target.dim(0) != d.b || target.dim(1) != d.h || target.dim(2) != d.w) {
    throw ShapeError("dice_ce_loss: target " + shape_str(target.shape()) + " does not match logits " +
                     shape_str(logits.shape()));
  }
  const std::size_t K = d.c, P = d.plane(), N = d.b * P;
  std::vector<std::size_t> label(N);
  for (std::size_t i = 0; i < N; ++i) {
    const float t = target.data()[i];
    if (!(t >= 0.0f) || t >= static_cast<float>(K) || t != std::floor(t)) {
      throw std::invalid_argument("dice_ce_loss: class id " + std::to_string(t) + " outside [0, " +
                                  std::to_string(K) + ")");
    }
    label[i] = static_cast<std::size_t>(t);
  }
  // Softmax per pixel in double.
  std::vector<double> prob(logits.numel());
  double ce = 0.0;
  const auto z = logits.data();
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t base = b * K * P + p;
      double m = z[base];
      for (std::size_t c = 1; c < K; ++c) m = std::max(m, static_cast<double>(z[base + c * P]));
      double s = 0.0;
      for (std::size_t c = 0; c < K; ++c) s += std::exp(z[base + c * P] - m);
      for (std::size_t c = 0; c < K; ++c) prob[base + c * P] = std::exp(z[base + c * P] - m) / s;
      ce -= (z[base + label[b * P + p] * P] - m) - std::log(s);
    }
  ce /= static_cast<double>(N);

  std::vector<double> inter(K, 0.0), psum(K, 0.0), gsum(K, 0.0);
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < K; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const double pr = prob[(b * K + c) * P + p];
        const bool y = label[b * P + p] == c;
        psum[c] += pr;
        if (y) {
          inter[c] += pr;
          gsum[c] += 1.0;
        }
      }
  double dice = 0.0;
  for (std::size_t c = 0; c < K; ++c) dice += (2.0 * inter[c] + kDiceSmooth) / (psum[c] + gsum[c] + kDiceSmooth);
  dice /= static_cast<double>(K);

  LossEval out{{ce, dice}, {}};
  if (!with_grad) return out;
  // dL/dp for the Dice half, then through the softmax; the CE half is (p - y) / N.
  out.grad.resize(logits.numel());
  std::vector<double> gp(K);
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t p = 0; p < P; ++p) {
      const std::size_t lab = label[b * P + p];
      double dot = 0.0;
      for (std::size_t c = 0; c < K; ++c) {
        const double den = psum[c] + gsum[c] + kDiceSmooth;
        const double ddice = (2.0 * (lab == c) * den - (2.0 * inter[c] + kDiceSmooth)) / (den * den);
        gp[c] = -0.5 / static_cast<double>(K) * ddice;
        dot += prob[(b * K + c) * P + p] * gp[c];
      }
      for (std::size_t c = 0; c < K; ++c) {
        const std::size_t i = (b * K + c) * P + p;
        const double g_dice = prob[i] * (gp[c] - dot);
        const double g_ce = 0.5 * (prob[i] - (lab == c ? 1.0 : 0.0)) / static_cast<double>(N);
        out.grad[i] = static_cast<float>(g_dice + g_ce);
      }
    }
  return out;
}

}  // namespace detail

// target holds class ids as floats, [B, H, W].
inline LossParts dice_ce_parts(const Tensor& logits, const Tensor& target) {
  return detail::dice_ce(logits, target, false).parts;
}

// 0.5 * CE + 0.5 * (1 - mean soft Dice), scalar.
inline Tensor dice_ce_loss(const Tensor& logits, const Tensor& target) {
  auto eval = detail::dice_ce(logits, target, logits.requires_grad() && grad_enabled());
  return make_result({1}, {static_cast<float>(eval.parts.total())}, {logits},
                     [g = std::move(eval.grad)](detail::Node& self) {
                       auto* gl = grad_sink(self, 0);
                       if (!gl) return;
                       const float up = self.grad[0];
                       for (std::size_t i = 0; i < g.size(); ++i) (*gl)[i] += up * g[i];
                     });
}

// ---------------------------------------------------------------------------
// Optimization

struct OptimHyper {
  double lr0 = 1e-3;
  double lr_min = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t total_steps = 1;
  double clip_norm = 1.0;  // <= 0 disables clipping

  void validate() const {
    if (!(lr0 > lr_min) || lr_min < 0.0) throw std::invalid_argument("OptimHyper: need lr0 > lr_min >= 0");
    if (total_steps == 0) throw std::invalid_argument("OptimHyper: total_steps must be >= 1");
  }
};

// lr_min + (lr0 - lr_min) * (1 + cos(pi * step / T)) / 2, clamped past T.
inline float cosine_lr(std::size_t step, const OptimHyper& h) {
  if (step >= h.total_steps) return static_cast<float>(h.lr_min);
  const double t = static_cast<double>(step) / static_cast<double>(h.total_steps);
  return static_cast<float>(h.lr_min + 0.5 * (h.lr0 - h.lr_min) * (1.0 + std::cos(std::numbers::pi * t)));
}

// Returns the global L2 norm before clipping.
inline double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.has_grad())
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / (norm + 1e-6));
    for (auto p : params)
      if (p.has_grad())
        for (auto& g : p.mutable_grad()) g *= s;
  }
  return norm;
}

// Decoupled weight decay, then the bias-corrected Adam step.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, const OptimHyper& hyper) : params_(std::move(params)), hyper_(hyper) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  void step(float lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
    const auto b1 = static_cast<float>(hyper_.beta1), b2 = static_cast<float>(hyper_.beta2);
    const auto decay = static_cast<float>(lr * hyper_.weight_decay);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto w = params_[i].mutable_data();
      const bool has = params_[i].has_grad();
      const auto g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const float gj = has ? g[j] : 0.0f;
        w[j] -= decay * w[j];
        m[j] = b1 * m[j] + (1.0f - b1) * gj;
        v[j] = b2 * v[j] + (1.0f - b2) * gj * gj;
        const double mh = m[j] / bc1, vh = v[j] / bc2;
        w[j] -= static_cast<float>(lr * mh / (std::sqrt(vh) + hyper_.eps));
      }
    }
  }

  std::size_t steps() const { return t_; }
  const std::vector<std::vector<float>>& first_moments() const { return m_; }
  const std::vector<std::vector<float>>& second_moments() const { return v_; }

 private:
  std::vector<Tensor> params_;
  OptimHyper hyper_;
  std::vector<std::vector<float>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Inference

// Mean of softmax probabilities over {identity, hflip, vflip, both}, each
// prediction flipped back before averaging. predict maps images to logits.
template <class Predict>
Tensor tta_predict(Predict&& predict, const Tensor& x) {
  NoGradGuard guard;
  auto probs = [&](const Tensor& in) { return softmax(predict(in), 1); };
  Tensor acc = probs(x);
  acc = add(acc, flip(probs(flip(x, 3)), 3));
  acc = add(acc, flip(probs(flip(x, 2)), 2));
  acc = add(acc, flip(flip(probs(flip(flip(x, 2), 3)), 3), 2));
  return scale(acc, 0.25f);
}

inline Tensor predict_logits(const Model& model, const Tensor& x) {
  NoGradGuard guard;
  return model.forward(x, Pass{});
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainOptions {
  std::size_t epochs = 1;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool augment = true;
};

struct LossRecord {
  std::size_t step;
  float lr;
  float loss;
};

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch) { return (n + batch - 1) / batch; }

// Shuffles each epoch, applies random flips, steps AdamW with the cosine
// schedule (hyper.total_steps is overwritten with epochs * batches). All
// randomness comes from one generator seeded by opts.seed.
template <class DatasetT>
std::vector<LossRecord> train(Model& model, const DatasetT& data, OptimHyper hyper, const TrainOptions& opts,
                              const std::function<void(const LossRecord&)>& on_step = {}) {
  if (data.size() == 0) throw std::invalid_argument("train: empty dataset");
  if (opts.batch_size == 0) throw std::invalid_argument("train: batch_size must be >= 1");
  const std::size_t per_epoch = steps_per_epoch(data.size(), opts.batch_size);
  hyper.total_steps = std::max<std::size_t>(opts.epochs * per_epoch, 1);
  hyper.validate();
  Rng rng(opts.seed);
  auto params = model.parameters();
  AdamW opt(params, hyper);
  std::vector<LossRecord> log;
  std::vector<std::size_t> order(data.size());
  for (std::size_t e = 0; e < opts.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      std::vector<Sample> batch;
      for (std::size_t i = start; i < std::min(start + opts.batch_size, order.size()); ++i) {
        Sample s = data.get(order[i]);
        batch.push_back(opts.augment ? augment(s, random_flags(rng)) : std::move(s));
      }
      const auto [images, target] = make_batch(batch);
      const std::size_t step = log.size();
      const float lr = cosine_lr(step, hyper);
      model.zero_grad();
      const auto loss = dice_ce_loss(model.forward(images, Pass{true, &rng}), target);
      backward(loss);
      clip_grad_norm(params, hyper.clip_norm);
      opt.step(lr);
      log.push_back({step, lr, loss.item()});
      if (on_step) on_step(log.back());
    }
  }
  return log;
}

inline void write_loss_csv(const std::filesystem::path& path, const std::vector<LossRecord>& log) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "step,lr,loss\n";
  char line[96];
  for (const auto& r : log) {
    std::snprintf(line, sizeof line, "%zu,%.6f,%.6f\n", r.step, static_cast<double>(r.lr), static_cast<double>(r.loss));
    os << line;
  }
}

}  // namespace mdrwkv
