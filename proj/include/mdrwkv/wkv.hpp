#pragma once

// Exponential-decay key/value accumulation over a flattened spatial sequence:
//
//   y(t, c) = sum_{s <= t} exp(w_c (s - t)) * (u_c + k(s, c)) * v(s, c)
//
// with decay w_c >= 0 and bonus u_c applied to every term. The scan evaluates
// it through y(t) = exp(-w) y(t-1) + (u + k(t)) v(t); the naive form sums the
// double loop literally and serves as the oracle. Tensors are f32; both
// kernels accumulate in f64 so long low-decay sums keep ~1 ulp agreement.

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "mdrwkv/ops.hpp"
#include "mdrwkv/tensor.hpp"

namespace mdrwkv {

// Per-channel decay (through softplus, so always >= 0) and bonus.
struct WkvParams {
  Tensor w_raw;  // [C']
  Tensor u;      // [C']

  std::size_t channels() const { return u.numel(); }

  std::vector<float> decay() const {
    std::vector<float> w(w_raw.numel());
    for (std::size_t c = 0; c < w.size(); ++c) w[c] = softplus_value(w_raw.data()[c]);
    return w;
  }

  // Inverse softplus; w must be > 0.
  static float raw_from_decay(float w) {
    return w > 20.0f ? w : static_cast<float>(std::log(std::expm1(static_cast<double>(w))));
  }

  static WkvParams from_decay(std::span<const float> w, std::span<const float> u,
                              bool trainable = false) {
    std::vector<float> raw(w.size());
    for (std::size_t c = 0; c < w.size(); ++c) raw[c] = raw_from_decay(w[c]);
    const std::size_t n = raw.size();
    return {Tensor({n}, std::move(raw), trainable),
            Tensor({u.size()}, std::vector<float>(u.begin(), u.end()), trainable)};
  }

  // Decays spaced log-uniformly over [w_min, w_max] across channels, zero bonus.
  static WkvParams multi_timescale(std::size_t channels, float w_min = 0.3f, float w_max = 3.0f) {
    std::vector<float> w(channels), u(channels, 0.0f);
    for (std::size_t c = 0; c < channels; ++c) {
      const double t = channels > 1 ? static_cast<double>(c) / static_cast<double>(channels - 1) : 0.0;
      w[c] = static_cast<float>(std::exp(std::log(w_min) + t * (std::log(w_max) - std::log(w_min))));
    }
    return from_decay(w, u, true);
  }
};

struct WkvGrads {
  std::vector<float> k, v;
  std::vector<float> w;      // d/d decay
  std::vector<float> w_raw;  // d/d w_raw (chain through softplus)
  std::vector<float> u;
};

namespace detail {

struct SeqDims {
  std::size_t batch, length, channels;
};

inline SeqDims check_sequence(const Tensor& k, const Tensor& v, std::size_t w_size,
                              std::size_t u_size) {
  if (k.rank() != 3 || k.shape() != v.shape()) {
    throw ShapeError("wkv: keys " + shape_str(k.shape()) + " and values " +
                     shape_str(v.shape()) + " must share a [B, T, C] shape");
  }
  SeqDims d{k.dim(0), k.dim(1), k.dim(2)};
  if (d.length == 0) throw ShapeError("wkv: sequence length must be >= 1");
  if (w_size != d.channels || u_size != d.channels) {
    throw ShapeError("wkv: decay/bonus sizes " + std::to_string(w_size) + "/" +
                     std::to_string(u_size) + " do not match " + std::to_string(d.channels) +
                     " channels");
  }
  return d;
}

inline void wkv_scan_kernel(const float* k, const float* v, const float* w, const float* u,
                            SeqDims d, float* y) {
  const std::size_t C = d.channels;
  std::vector<double> decay(C), state(C);
  for (std::size_t c = 0; c < C; ++c) decay[c] = std::exp(-static_cast<double>(w[c]));
  for (std::size_t b = 0; b < d.batch; ++b) {
    std::fill(state.begin(), state.end(), 0.0);
    for (std::size_t t = 0; t < d.length; ++t) {
      const std::size_t row = (b * d.length + t) * C;
      for (std::size_t c = 0; c < C; ++c) {
        state[c] = decay[c] * state[c] +
                   static_cast<double>((u[c] + k[row + c]) * v[row + c]);
        y[row + c] = static_cast<float>(state[c]);
      }
    }
  }
}

inline void wkv_naive_kernel(const float* k, const float* v, const float* w, const float* u,
                             SeqDims d, float* y) {
  const std::size_t C = d.channels;
  for (std::size_t b = 0; b < d.batch; ++b) {
    const std::size_t base = b * d.length * C;
    for (std::size_t t = 0; t < d.length; ++t) {
      for (std::size_t c = 0; c < C; ++c) {
        double acc = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          const float lag = static_cast<float>(s) - static_cast<float>(t);
          const std::size_t i = base + s * C + c;
          acc += static_cast<double>(std::exp(w[c] * lag)) * ((u[c] + k[i]) * v[i]);
        }
        y[base + t * C + c] = static_cast<float>(acc);
      }
    }
  }
}

// Reverse scan. y is the forward output, g = dL/dy.
inline void wkv_backward_kernel(const float* k, const float* v, const float* w, const float* u,
                                const float* y, const float* g, SeqDims d, float* gk, float* gv,
                                double* gw, double* gu) {
  const std::size_t C = d.channels;
  std::vector<double> decay(C), adj(C);
  for (std::size_t c = 0; c < C; ++c) decay[c] = std::exp(-static_cast<double>(w[c]));
  for (std::size_t b = 0; b < d.batch; ++b) {
    const std::size_t base = b * d.length * C;
    std::fill(adj.begin(), adj.end(), 0.0);
    for (std::size_t t = d.length; t-- > 0;) {
      const std::size_t row = base + t * C;
      for (std::size_t c = 0; c < C; ++c) {
        const double a = g[row + c] + decay[c] * adj[c];
        adj[c] = a;
        if (gk) gk[row + c] += static_cast<float>(a * v[row + c]);
        if (gv) gv[row + c] += static_cast<float>(a * (u[c] + k[row + c]));
        gu[c] += a * v[row + c];
        if (t > 0) gw[c] -= a * decay[c] * y[row - C + c];
      }
    }
  }
}

}  // namespace detail

// O(T^2) literal evaluation. w holds the decays themselves (not w_raw).
inline Tensor wkv_forward_naive(const Tensor& k, const Tensor& v, std::span<const float> w,
                                std::span<const float> u) {
  const auto d = detail::check_sequence(k, v, w.size(), u.size());
  std::vector<float> y(k.numel());
  detail::wkv_naive_kernel(k.data().data(), v.data().data(), w.data(), u.data(), d, y.data());
  return Tensor(k.shape(), std::move(y));
}

inline Tensor wkv_forward_naive(const Tensor& k, const Tensor& v, const WkvParams& params) {
  const auto w = params.decay();
  return wkv_forward_naive(k, v, w, params.u.data());
}

// O(T) recurrence; no gradient tracking.
inline Tensor wkv_forward_scan(const Tensor& k, const Tensor& v, std::span<const float> w,
                               std::span<const float> u) {
  const auto d = detail::check_sequence(k, v, w.size(), u.size());
  std::vector<float> y(k.numel());
  detail::wkv_scan_kernel(k.data().data(), v.data().data(), w.data(), u.data(), d, y.data());
  return Tensor(k.shape(), std::move(y));
}

inline Tensor wkv_forward_scan(const Tensor& k, const Tensor& v, const WkvParams& params) {
  const auto w = params.decay();
  return wkv_forward_scan(k, v, w, params.u.data());
}

// Gradients of sum(grad_out * y) with respect to k, v, the decay, w_raw and u.
inline WkvGrads wkv_backward(const Tensor& k, const Tensor& v, const WkvParams& params,
                             const Tensor& grad_out) {
  const auto w = params.decay();
  const auto d = detail::check_sequence(k, v, w.size(), params.u.numel());
  if (grad_out.shape() != k.shape()) {
    throw ShapeError("wkv_backward: grad_out " + shape_str(grad_out.shape()) +
                     " does not match " + shape_str(k.shape()));
  }
  const auto y = wkv_forward_scan(k, v, w, params.u.data());
  WkvGrads out;
  out.k.assign(k.numel(), 0.0f);
  out.v.assign(k.numel(), 0.0f);
  std::vector<double> gw(d.channels, 0.0), gu(d.channels, 0.0);
  detail::wkv_backward_kernel(k.data().data(), v.data().data(), w.data(), params.u.data().data(),
                              y.data().data(), grad_out.data().data(), d, out.k.data(),
                              out.v.data(), gw.data(), gu.data());
  for (std::size_t c = 0; c < d.channels; ++c) {
    const float raw = params.w_raw.data()[c];
    out.w.push_back(static_cast<float>(gw[c]));
    out.w_raw.push_back(static_cast<float>(gw[c] / (1.0 + std::exp(-static_cast<double>(raw)))));
    out.u.push_back(static_cast<float>(gu[c]));
  }
  return out;
}

// Differentiable scan: k, v [B, T, C]; w_raw, u [C].
inline Tensor wkv(const Tensor& k, const Tensor& v, const Tensor& w_raw, const Tensor& u) {
  const auto d = detail::check_sequence(k, v, w_raw.numel(), u.numel());
  std::vector<float> w(d.channels);
  for (std::size_t c = 0; c < d.channels; ++c) w[c] = softplus_value(w_raw.data()[c]);
  std::vector<float> y(k.numel());
  detail::wkv_scan_kernel(k.data().data(), v.data().data(), w.data(), u.data().data(), d, y.data());
  return make_result(k.shape(), std::move(y), {k, v, w_raw, u},
                     [d, w = std::move(w)](detail::Node& self) {
                       auto* gk = grad_sink(self, 0);
                       auto* gv = grad_sink(self, 1);
                       auto* gwr = grad_sink(self, 2);
                       auto* gu = grad_sink(self, 3);
                       const auto& kd = self.parents[0]->data;
                       const auto& vd = self.parents[1]->data;
                       const auto& raw = self.parents[2]->data;
                       const auto& ud = self.parents[3]->data;
                       std::vector<double> dw(d.channels, 0.0), du(d.channels, 0.0);
                       detail::wkv_backward_kernel(kd.data(), vd.data(), w.data(), ud.data(),
                                                   self.data.data(), self.grad.data(), d,
                                                   gk ? gk->data() : nullptr,
                                                   gv ? gv->data() : nullptr, dw.data(), du.data());
                       for (std::size_t c = 0; c < d.channels; ++c) {
                         if (gwr) {
                           (*gwr)[c] += static_cast<float>(
                               dw[c] / (1.0 + std::exp(-static_cast<double>(raw[c]))));
                         }
                         if (gu) (*gu)[c] += static_cast<float>(du[c]);
                       }
                     });
}

inline Tensor wkv(const Tensor& k, const Tensor& v, const WkvParams& params) {
  return wkv(k, v, params.w_raw, params.u);
}

// [B, C, H, W] -> [B, H*W, C], row-major raster order.
inline Tensor flatten_raster(const Tensor& x) {
  detail::require_rank(x, 4, "flatten_raster");
  const detail::Dims4 d(x.shape());
  const std::size_t T = d.plane();
  std::vector<float> out(x.numel());
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t t = 0; t < T; ++t)
        out[(b * T + t) * d.c + c] = x.data()[(b * d.c + c) * T + t];
  return make_result({d.b, T, d.c}, std::move(out), {x}, [d, T](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    for (std::size_t b = 0; b < d.b; ++b)
      for (std::size_t c = 0; c < d.c; ++c)
        for (std::size_t t = 0; t < T; ++t)
          (*gx)[(b * d.c + c) * T + t] += self.grad[(b * T + t) * d.c + c];
  });
}

// [B, T, C] -> [B, C, H, W]; T must equal H*W.
inline Tensor unflatten_raster(const Tensor& seq, std::size_t height, std::size_t width) {
  detail::require_rank(seq, 3, "unflatten_raster");
  const std::size_t B = seq.dim(0), T = seq.dim(1), C = seq.dim(2);
  if (T != height * width) {
    throw ShapeError("unflatten_raster: sequence length " + std::to_string(T) +
                     " != " + std::to_string(height) + "x" + std::to_string(width));
  }
  std::vector<float> out(seq.numel());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < T; ++t)
        out[(b * C + c) * T + t] = seq.data()[(b * T + t) * C + c];
  return make_result({B, C, height, width}, std::move(out), {seq}, [B, T, C](detail::Node& self) {
    auto* gs = grad_sink(self, 0);
    if (!gs) return;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t t = 0; t < T; ++t)
          (*gs)[(b * T + t) * C + c] += self.grad[(b * C + c) * T + t];
  });
}

}  // namespace mdrwkv
