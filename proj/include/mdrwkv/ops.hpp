#pragma once

// Differentiable primitives over B x C x H x W tensors.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "mdrwkv/tensor.hpp"

namespace mdrwkv {

enum class NormMode { layer, batch };
enum class Activation { relu, sigmoid, softmax };
enum class PoolKind { global_avg, channel_avg, channel_max };

inline constexpr float kNormEps = 1e-5f;

namespace detail {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     " tensor, got " + shape_str(t.shape()));
  }
}

struct Dims4 {
  std::size_t b, c, h, w;
  explicit Dims4(const Shape& s) : b(s[0]), c(s[1]), h(s[2]), w(s[3]) {}
  std::size_t plane() const { return h * w; }
};

inline void im2col(const float* x, std::size_t channels, std::size_t height,
                   std::size_t width, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t out_h,
                   std::size_t out_w, float* cols) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        float* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                          static_cast<std::ptrdiff_t>(pad);
          float* dst = row + oy * out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(dst, dst + out_w, 0.0f);
            continue;
          }
          const float* src = x + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                          ? 0.0f
                          : src[ix];
          }
        }
      }
    }
  }
}

inline void col2im(const float* cols, std::size_t channels, std::size_t height,
                   std::size_t width, std::size_t kh, std::size_t kw,
                   std::size_t stride, std::size_t pad, std::size_t out_h,
                   std::size_t out_w, float* x) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const float* row = cols + ((c * kh + ki) * kw + kj) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) -
                          static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          float* dst = x + (c * height + static_cast<std::size_t>(iy)) * width;
          const float* src = row + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                            static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

// Broadcast layout for two same-rank operands padded to rank 4.
struct Broadcast {
  Shape out;
  std::size_t dims[4];
  std::size_t stride_a[4];
  std::size_t stride_b[4];

  Broadcast(const Shape& a, const Shape& b, const char* op) {
    if (a.size() != b.size() || a.size() > 4 || a.empty()) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    }
    const std::size_t pad = 4 - a.size();
    std::size_t da[4], db[4];
    for (std::size_t i = 0; i < 4; ++i) {
      da[i] = i < pad ? 1 : a[i - pad];
      db[i] = i < pad ? 1 : b[i - pad];
      if (da[i] != db[i] && da[i] != 1 && db[i] != 1) {
        throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                         " with " + shape_str(b));
      }
      dims[i] = std::max(da[i], db[i]);
    }
    std::size_t sa = 1, sb = 1;
    for (int i = 3; i >= 0; --i) {
      stride_a[i] = da[i] == 1 ? 0 : sa;
      stride_b[i] = db[i] == 1 ? 0 : sb;
      sa *= da[i];
      sb *= db[i];
    }
    for (std::size_t i = pad; i < 4; ++i) out.push_back(dims[i]);
  }

  template <class F>
  void for_each(F&& f) const {
    std::size_t o = 0;
    for (std::size_t i0 = 0; i0 < dims[0]; ++i0)
      for (std::size_t i1 = 0; i1 < dims[1]; ++i1)
        for (std::size_t i2 = 0; i2 < dims[2]; ++i2) {
          std::size_t ia = i0 * stride_a[0] + i1 * stride_a[1] + i2 * stride_a[2];
          std::size_t ib = i0 * stride_b[0] + i1 * stride_b[1] + i2 * stride_b[2];
          for (std::size_t i3 = 0; i3 < dims[3]; ++i3, ++o) {
            f(o, ia, ib);
            ia += stride_a[3];
            ib += stride_b[3];
          }
        }
  }
};

template <class Fwd, class DerivFromOut>
Tensor unary(const Tensor& x, Fwd fwd, DerivFromOut deriv) {
  std::vector<float> out(x.numel());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  return make_result(x.shape(), std::move(out), {x}, [deriv](Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    const auto& xin = self.parents[0]->data;
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      (*gx)[i] += self.grad[i] * deriv(xin[i], self.data[i]);
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (same-rank broadcasting over size-1 extents)

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc(a.shape(), b.shape(), "add");
  std::vector<float> out(numel(bc.out));
  const auto da = a.data(), db = b.data();
  bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = da[ia] + db[ib]; });
  return make_result(bc.out, std::move(out), {a, b}, [bc](detail::Node& self) {
    auto* ga = grad_sink(self, 0);
    auto* gb = grad_sink(self, 1);
    bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += self.grad[o];
      if (gb) (*gb)[ib] += self.grad[o];
    });
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc(a.shape(), b.shape(), "sub");
  std::vector<float> out(numel(bc.out));
  const auto da = a.data(), db = b.data();
  bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = da[ia] - db[ib]; });
  return make_result(bc.out, std::move(out), {a, b}, [bc](detail::Node& self) {
    auto* ga = grad_sink(self, 0);
    auto* gb = grad_sink(self, 1);
    bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += self.grad[o];
      if (gb) (*gb)[ib] -= self.grad[o];
    });
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::Broadcast bc(a.shape(), b.shape(), "mul");
  std::vector<float> out(numel(bc.out));
  const auto da = a.data(), db = b.data();
  bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) { out[o] = da[ia] * db[ib]; });
  return make_result(bc.out, std::move(out), {a, b}, [bc](detail::Node& self) {
    auto* ga = grad_sink(self, 0);
    auto* gb = grad_sink(self, 1);
    const auto& va = self.parents[0]->data;
    const auto& vb = self.parents[1]->data;
    bc.for_each([&](std::size_t o, std::size_t ia, std::size_t ib) {
      if (ga) (*ga)[ia] += self.grad[o] * vb[ib];
      if (gb) (*gb)[ib] += self.grad[o] * va[ia];
    });
  });
}

inline Tensor scale(const Tensor& x, float factor) {
  return detail::unary(
      x, [factor](float v) { return v * factor; },
      [factor](float, float) { return factor; });
}

inline Tensor add_scalar(const Tensor& x, float value) {
  return detail::unary(
      x, [value](float v) { return v + value; }, [](float, float) { return 1.0f; });
}

// 1 - x
inline Tensor one_minus(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return 1.0f - v; }, [](float, float) { return -1.0f; });
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.data()) acc += v;
  return make_result({1}, {static_cast<float>(acc)}, {x}, [](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    for (auto& g : *gx) g += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0f / static_cast<float>(x.numel())); }

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return make_result(std::move(shape), x.to_vector(), {x}, [](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Activations

inline Tensor relu(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return v > 0.0f ? v : 0.0f; },
      [](float in, float) { return in > 0.0f ? 1.0f : 0.0f; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); },
      [](float, float out) { return out * (1.0f - out); });
}

inline float softplus_value(float v) {
  return v > 20.0f ? v : std::log1p(std::exp(v));
}

inline Tensor softplus(const Tensor& x) {
  return detail::unary(
      x, softplus_value, [](float in, float) { return 1.0f / (1.0f + std::exp(-in)); });
}

// Normalizes along one axis of any-rank tensor.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(x.shape()));
  }
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  std::vector<float> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      float mx = -std::numeric_limits<float>::infinity();
      for (std::size_t k = 0; k < n; ++k) mx = std::max(mx, in[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const float e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      const float inv = static_cast<float>(1.0 / total);
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
    }
  }
  return make_result(s, std::move(out), {x}, [outer, inner, n](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * n * inner + i;
        float dot = 0.0f;
        for (std::size_t k = 0; k < n; ++k) {
          dot += self.grad[base + k * inner] * self.data[base + k * inner];
        }
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          (*gx)[idx] += self.data[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

inline Tensor activation(const Tensor& x, Activation kind, std::size_t axis = 1) {
  switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::softmax: return softmax(x, axis);
  }
  throw std::invalid_argument("activation: unknown kind");
}

// ---------------------------------------------------------------------------
// Convolutions

// Cross-correlation with square or rectangular odd kernels.
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
                     std::size_t stride = 1, std::size_t padding = 0) {
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  const detail::Dims4 in(input.shape());
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != in.c || kh % 2 == 0 || kw % 2 == 0 || stride == 0 ||
      in.h + 2 * padding < kh || in.w + 2 * padding < kw) {
    throw ShapeError("conv2d: input " + shape_str(input.shape()) +
                     " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match weight " +
                     shape_str(weight.shape()));
  }
  const std::size_t oh = (in.h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (in.w + 2 * padding - kw) / stride + 1;
  const std::size_t plane = oh * ow;
  const std::size_t depth = in.c * kh * kw;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && padding == 0;

  // Eigen chooses packet or scalar paths from runtime pointer alignment and
  // the two round differently (fma), so every GEMM operand and destination is
  // an Eigen-owned aligned matrix. Results then depend only on shapes.
  std::vector<float> out(in.b * cout * plane);
  detail::RowMat cols(depth, plane), prod(cout, plane);
  const detail::RowMat wmat = detail::ConstMatMap(weight.data().data(), cout, depth);
  for (std::size_t b = 0; b < in.b; ++b) {
    const float* xb = input.data().data() + b * in.c * in.plane();
    if (pointwise) {
      cols = detail::ConstMatMap(xb, depth, plane);
    } else {
      detail::im2col(xb, in.c, in.h, in.w, kh, kw, stride, padding, oh, ow, cols.data());
    }
    prod.noalias() = wmat * cols;
    float* ob = out.data() + b * cout * plane;
    for (std::size_t co = 0; co < cout; ++co) {
      const float add = bias.defined() ? bias.data()[co] : 0.0f;
      for (std::size_t p = 0; p < plane; ++p) ob[co * plane + p] = prod(co, p) + add;
    }
  }

  Shape out_shape{in.b, cout, oh, ow};
  auto rule = [in, cout, kh, kw, stride, padding, oh, ow, plane, depth,
               pointwise](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    auto* gw = grad_sink(self, 1);
    auto* gb = self.parents.size() > 2 ? grad_sink(self, 2) : nullptr;
    const auto& x = self.parents[0]->data;
    const detail::RowMat wmat = detail::ConstMatMap(self.parents[1]->data.data(), cout, depth);
    detail::RowMat cols(depth, plane), gout(cout, plane), dcols(depth, plane);
    detail::RowMat gwsum = detail::RowMat::Zero(gw ? cout : 0, gw ? depth : 0);
    for (std::size_t b = 0; b < in.b; ++b) {
      gout = detail::ConstMatMap(self.grad.data() + b * cout * plane, cout, plane);
      const float* xb = x.data() + b * in.c * in.plane();
      if (gw) {
        if (pointwise) {
          cols = detail::ConstMatMap(xb, depth, plane);
        } else {
          detail::im2col(xb, in.c, in.h, in.w, kh, kw, stride, padding, oh, ow, cols.data());
        }
        gwsum.noalias() += gout * cols.transpose();
      }
      if (gx) {
        float* gxb = gx->data() + b * in.c * in.plane();
        dcols.noalias() = wmat.transpose() * gout;
        if (pointwise) {
          for (std::size_t i = 0; i < depth * plane; ++i) gxb[i] += dcols.data()[i];
        } else {
          detail::col2im(dcols.data(), in.c, in.h, in.w, kh, kw, stride, padding, oh, ow, gxb);
        }
      }
      if (gb) {
        for (std::size_t co = 0; co < cout; ++co) {
          float acc = 0.0f;
          for (std::size_t p = 0; p < plane; ++p) acc += gout(co, p);
          (*gb)[co] += acc;
        }
      }
    }
    if (gw) {
      for (std::size_t i = 0; i < cout * depth; ++i) (*gw)[i] += gwsum.data()[i];
    }
  };
  if (bias.defined()) {
    return make_result(std::move(out_shape), std::move(out), {input, weight, bias}, rule);
  }
  return make_result(std::move(out_shape), std::move(out), {input, weight}, rule);
}

// One k x k filter per channel (weight [C, 1, k, k]), stride 1.
inline Tensor depthwise_conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias = {},
                               std::size_t padding = 0) {
  detail::require_rank(input, 4, "depthwise_conv2d");
  detail::require_rank(weight, 4, "depthwise_conv2d");
  const detail::Dims4 in(input.shape());
  const std::size_t kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != in.c || weight.dim(1) != 1 || kh % 2 == 0 || kw % 2 == 0 ||
      in.h + 2 * padding < kh || in.w + 2 * padding < kw) {
    throw ShapeError("depthwise_conv2d: input " + shape_str(input.shape()) +
                     " incompatible with weight " + shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != in.c)) {
    throw ShapeError("depthwise_conv2d: bias " + shape_str(bias.shape()) +
                     " does not match input " + shape_str(input.shape()));
  }
  const std::size_t oh = in.h + 2 * padding - kh + 1;
  const std::size_t ow = in.w + 2 * padding - kw + 1;
  const auto pad = static_cast<std::ptrdiff_t>(padding);
  const auto H = static_cast<std::ptrdiff_t>(in.h), W = static_cast<std::ptrdiff_t>(in.w);

  // Visits every (output, input, tap) triple that lands inside the image.
  auto for_taps = [=](auto&& f) {
    for (std::size_t b = 0; b < in.b; ++b)
      for (std::size_t c = 0; c < in.c; ++c) {
        const std::size_t xbase = (b * in.c + c) * in.h * in.w;
        const std::size_t obase = (b * in.c + c) * oh * ow;
        for (std::size_t ki = 0; ki < kh; ++ki)
          for (std::size_t kj = 0; kj < kw; ++kj) {
            const std::size_t widx = (c * kh + ki) * kw + kj;
            for (std::size_t oy = 0; oy < oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy + ki) - pad;
              if (iy < 0 || iy >= H) continue;
              const std::size_t x0 = kj < padding ? padding - kj : 0;
              const std::size_t x1 = std::min<std::size_t>(
                  ow, static_cast<std::size_t>(std::max<std::ptrdiff_t>(
                          0, W + pad - static_cast<std::ptrdiff_t>(kj))));
              for (std::size_t ox = x0; ox < x1; ++ox) {
                const std::size_t ix = ox + kj - padding;
                f(obase + oy * ow + ox, xbase + static_cast<std::size_t>(iy) * in.w + ix, widx);
              }
            }
          }
      }
  };

  std::vector<float> out(in.b * in.c * oh * ow, 0.0f);
  const auto x = input.data(), w = weight.data();
  for_taps([&](std::size_t o, std::size_t i, std::size_t k) { out[o] += x[i] * w[k]; });
  if (bias.defined()) {
    for (std::size_t b = 0; b < in.b; ++b)
      for (std::size_t c = 0; c < in.c; ++c) {
        float* dst = out.data() + (b * in.c + c) * oh * ow;
        for (std::size_t i = 0; i < oh * ow; ++i) dst[i] += bias.data()[c];
      }
  }
  auto rule = [for_taps, in, oh, ow](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    auto* gw = grad_sink(self, 1);
    auto* gb = self.parents.size() > 2 ? grad_sink(self, 2) : nullptr;
    const auto& xv = self.parents[0]->data;
    const auto& wv = self.parents[1]->data;
    const auto& g = self.grad;
    if (gx || gw) {
      for_taps([&](std::size_t o, std::size_t i, std::size_t k) {
        if (gx) (*gx)[i] += g[o] * wv[k];
        if (gw) (*gw)[k] += g[o] * xv[i];
      });
    }
    if (gb) {
      for (std::size_t b = 0; b < in.b; ++b)
        for (std::size_t c = 0; c < in.c; ++c) {
          const float* src = g.data() + (b * in.c + c) * oh * ow;
          float acc = 0.0f;
          for (std::size_t i = 0; i < oh * ow; ++i) acc += src[i];
          (*gb)[c] += acc;
        }
    }
  };
  Shape shape{in.b, in.c, oh, ow};
  if (bias.defined()) return make_result(shape, std::move(out), {input, weight, bias}, rule);
  return make_result(shape, std::move(out), {input, weight}, rule);
}

// Per-channel k x k spatial filter ("same" padding) followed by a 1x1 mix.
inline Tensor depthwise_separable_conv(const Tensor& input, const Tensor& dw_weight,
                                       const Tensor& pw_weight) {
  detail::require_rank(dw_weight, 4, "depthwise_separable_conv");
  detail::require_rank(pw_weight, 4, "depthwise_separable_conv");
  if (input.rank() != 4 || dw_weight.dim(0) != input.dim(1) || pw_weight.dim(1) != input.dim(1)) {
    throw ShapeError("depthwise_separable_conv: channel mismatch between input " +
                     shape_str(input.shape()) + ", depthwise " + shape_str(dw_weight.shape()) +
                     " and pointwise " + shape_str(pw_weight.shape()));
  }
  const auto spatial = depthwise_conv2d(input, dw_weight, {}, dw_weight.dim(2) / 2);
  return conv2d(spatial, pw_weight);
}

// ---------------------------------------------------------------------------
// Normalization

// Layer mode: statistics over C at each (b, h, w). Batch mode: over (B, H, W)
// for each channel. scale and bias are per-channel [C].
inline Tensor normalize(const Tensor& input, NormMode mode, const Tensor& scale,
                        const Tensor& bias, float eps = kNormEps) {
  detail::require_rank(input, 4, "normalize");
  const detail::Dims4 d(input.shape());
  if (scale.numel() != d.c || bias.numel() != d.c) {
    throw ShapeError("normalize: affine parameters " + shape_str(scale.shape()) + "/" +
                     shape_str(bias.shape()) + " do not match input " +
                     shape_str(input.shape()));
  }
  if (!(eps > 0.0f)) throw std::invalid_argument("normalize: eps must be positive");
  const std::size_t plane = d.plane();
  const auto x = input.data();
  std::vector<float> xhat(x.size());

  // Each "group" is one normalized set; index(group, j) enumerates its members.
  const bool layer = mode == NormMode::layer;
  const std::size_t groups = layer ? d.b * plane : d.c;
  const std::size_t members = layer ? d.c : d.b * plane;
  auto index = [=](std::size_t g, std::size_t j) -> std::size_t {
    if (layer) {
      const std::size_t b = g / plane, p = g % plane;
      return (b * d.c + j) * plane + p;
    }
    const std::size_t b = j / plane, p = j % plane;
    return (b * d.c + g) * plane + p;
  };
  std::vector<float> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    double m = 0.0;
    for (std::size_t j = 0; j < members; ++j) m += x[index(g, j)];
    m /= static_cast<double>(members);
    double v = 0.0;
    for (std::size_t j = 0; j < members; ++j) {
      const double dv = x[index(g, j)] - m;
      v += dv * dv;
    }
    v /= static_cast<double>(members);
    const double is = 1.0 / std::sqrt(v + eps);
    inv_std[g] = static_cast<float>(is);
    for (std::size_t j = 0; j < members; ++j) {
      const auto i = index(g, j);
      xhat[i] = static_cast<float>((x[i] - m) * is);
    }
  }
  std::vector<float> out(x.size());
  const auto sc = scale.data(), bi = bias.data();
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t i = (b * d.c + c) * plane + p;
        out[i] = xhat[i] * sc[c] + bi[c];
      }
  return make_result(
      input.shape(), std::move(out), {input, scale, bias},
      [d, plane, groups, members, index, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](detail::Node& self) {
        auto* gx = grad_sink(self, 0);
        auto* gs = grad_sink(self, 1);
        auto* gb = grad_sink(self, 2);
        const auto& g = self.grad;
        const auto& sc = self.parents[1]->data;
        for (std::size_t b = 0; b < d.b; ++b)
          for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t p = 0; p < plane; ++p) {
              const std::size_t i = (b * d.c + c) * plane + p;
              if (gs) (*gs)[c] += g[i] * xhat[i];
              if (gb) (*gb)[c] += g[i];
            }
        if (!gx) return;
        auto channel_of = [&](std::size_t i) { return (i / plane) % d.c; };
        for (std::size_t grp = 0; grp < groups; ++grp) {
          double mean_dy = 0.0, mean_dy_xhat = 0.0;
          for (std::size_t j = 0; j < members; ++j) {
            const auto i = index(grp, j);
            const double dy = g[i] * sc[channel_of(i)];
            mean_dy += dy;
            mean_dy_xhat += dy * xhat[i];
          }
          mean_dy /= static_cast<double>(members);
          mean_dy_xhat /= static_cast<double>(members);
          for (std::size_t j = 0; j < members; ++j) {
            const auto i = index(grp, j);
            const double dy = g[i] * sc[channel_of(i)];
            (*gx)[i] += static_cast<float>(inv_std[grp] * (dy - mean_dy - xhat[i] * mean_dy_xhat));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling

namespace detail {

inline Tensor global_avg_pool_keepdims(const Tensor& x) {
  require_rank(x, 4, "pool");
  const Dims4 d(x.shape());
  const std::size_t plane = d.plane();
  std::vector<float> out(d.b * d.c);
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc) {
    double acc = 0.0;
    for (std::size_t p = 0; p < plane; ++p) acc += x.data()[bc * plane + p];
    out[bc] = static_cast<float>(acc / static_cast<double>(plane));
  }
  return make_result({d.b, d.c, 1, 1}, std::move(out), {x}, [plane](Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    const float inv = 1.0f / static_cast<float>(plane);
    for (std::size_t bc = 0; bc < self.grad.size(); ++bc)
      for (std::size_t p = 0; p < plane; ++p) (*gx)[bc * plane + p] += self.grad[bc] * inv;
  });
}

inline Tensor channel_reduce(const Tensor& x, bool take_max) {
  require_rank(x, 4, "pool");
  const Dims4 d(x.shape());
  const std::size_t plane = d.plane();
  std::vector<float> out(d.b * plane);
  std::vector<std::size_t> argmax(take_max ? out.size() : 0);
  const auto v = x.data();
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const std::size_t o = b * plane + p;
      if (take_max) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < d.c; ++c) {
          if (v[(b * d.c + c) * plane + p] > v[(b * d.c + best) * plane + p]) best = c;
        }
        argmax[o] = best;
        out[o] = v[(b * d.c + best) * plane + p];
      } else {
        double acc = 0.0;
        for (std::size_t c = 0; c < d.c; ++c) acc += v[(b * d.c + c) * plane + p];
        out[o] = static_cast<float>(acc / static_cast<double>(d.c));
      }
    }
  return make_result({d.b, 1, d.h, d.w}, std::move(out), {x},
                     [d, plane, take_max, argmax = std::move(argmax)](Node& self) {
                       auto* gx = grad_sink(self, 0);
                       if (!gx) return;
                       const float inv = 1.0f / static_cast<float>(d.c);
                       for (std::size_t b = 0; b < d.b; ++b)
                         for (std::size_t p = 0; p < plane; ++p) {
                           const float g = self.grad[b * plane + p];
                           if (take_max) {
                             (*gx)[(b * d.c + argmax[b * plane + p]) * plane + p] += g;
                           } else {
                             for (std::size_t c = 0; c < d.c; ++c)
                               (*gx)[(b * d.c + c) * plane + p] += g * inv;
                           }
                         }
                     });
}

}  // namespace detail

// global_avg -> [B, C]; channel_avg / channel_max -> [B, 1, H, W].
inline Tensor pool(const Tensor& x, PoolKind kind) {
  switch (kind) {
    case PoolKind::global_avg: {
      auto pooled = detail::global_avg_pool_keepdims(x);
      return reshape(pooled, {x.dim(0), x.dim(1)});
    }
    case PoolKind::channel_avg: return detail::channel_reduce(x, false);
    case PoolKind::channel_max: return detail::channel_reduce(x, true);
  }
  throw std::invalid_argument("pool: unknown kind");
}

// ---------------------------------------------------------------------------
// Resampling and layout

// Samples input at (y, x) pixel coordinates coords[:, 0] and coords[:, 1],
// absolute or relative to each output pixel. Relative coordinates keep the
// fractional part exact in f32 however large the image. Neighbors outside the
// image read as zero.
inline Tensor bilinear_sample(const Tensor& input, const Tensor& coords, bool relative = false) {
  detail::require_rank(input, 4, "bilinear_sample");
  detail::require_rank(coords, 4, "bilinear_sample");
  const detail::Dims4 d(input.shape());
  if (coords.dim(0) != d.b || coords.dim(1) != 2 || coords.dim(2) != d.h || coords.dim(3) != d.w) {
    throw ShapeError("bilinear_sample: coords " + shape_str(coords.shape()) +
                     " do not match input " + shape_str(input.shape()));
  }
  const std::size_t plane = d.plane();
  const auto H = static_cast<long>(d.h), W = static_cast<long>(d.w);

  struct Tap {
    long y0, x0;
    float wy, wx;
  };
  std::vector<Tap> taps(d.b * plane);
  const auto cv = coords.data();
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      const float y = cv[(b * 2 + 0) * plane + p];
      const float x = cv[(b * 2 + 1) * plane + p];
      const float fy = std::floor(y), fx = std::floor(x);
      const long ry = relative ? static_cast<long>(p / d.w) : 0, rx = relative ? static_cast<long>(p % d.w) : 0;
      taps[b * plane + p] = {ry + static_cast<long>(fy), rx + static_cast<long>(fx), y - fy, x - fx};
    }
  auto fetch = [H, W](const float* img, long y, long x) -> float {
    return (y < 0 || y >= H || x < 0 || x >= W) ? 0.0f : img[y * W + x];
  };

  std::vector<float> out(input.numel());
  for (std::size_t b = 0; b < d.b; ++b)
    for (std::size_t c = 0; c < d.c; ++c) {
      const float* img = input.data().data() + (b * d.c + c) * plane;
      float* dst = out.data() + (b * d.c + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const Tap& t = taps[b * plane + p];
        dst[p] = (1.0f - t.wy) * (1.0f - t.wx) * fetch(img, t.y0, t.x0) +
                 (1.0f - t.wy) * t.wx * fetch(img, t.y0, t.x0 + 1) +
                 t.wy * (1.0f - t.wx) * fetch(img, t.y0 + 1, t.x0) +
                 t.wy * t.wx * fetch(img, t.y0 + 1, t.x0 + 1);
      }
    }

  return make_result(
      input.shape(), std::move(out), {input, coords},
      [d, plane, H, W, fetch, taps = std::move(taps)](detail::Node& self) {
        auto* gin = grad_sink(self, 0);
        auto* gco = grad_sink(self, 1);
        const auto& in = self.parents[0]->data;
        auto scatter = [H, W](float* img, long y, long x, float v) {
          if (y >= 0 && y < H && x >= 0 && x < W) img[y * W + x] += v;
        };
        for (std::size_t b = 0; b < d.b; ++b)
          for (std::size_t c = 0; c < d.c; ++c) {
            const std::size_t base = (b * d.c + c) * plane;
            const float* img = in.data() + base;
            for (std::size_t p = 0; p < plane; ++p) {
              const float g = self.grad[base + p];
              if (g == 0.0f) continue;
              const Tap& t = taps[b * plane + p];
              if (gin) {
                float* gi = gin->data() + base;
                scatter(gi, t.y0, t.x0, g * (1.0f - t.wy) * (1.0f - t.wx));
                scatter(gi, t.y0, t.x0 + 1, g * (1.0f - t.wy) * t.wx);
                scatter(gi, t.y0 + 1, t.x0, g * t.wy * (1.0f - t.wx));
                scatter(gi, t.y0 + 1, t.x0 + 1, g * t.wy * t.wx);
              }
              if (gco) {
                const float v00 = fetch(img, t.y0, t.x0), v01 = fetch(img, t.y0, t.x0 + 1);
                const float v10 = fetch(img, t.y0 + 1, t.x0), v11 = fetch(img, t.y0 + 1, t.x0 + 1);
                (*gco)[(b * 2 + 0) * plane + p] +=
                    g * ((1.0f - t.wx) * (v10 - v00) + t.wx * (v11 - v01));
                (*gco)[(b * 2 + 1) * plane + p] +=
                    g * ((1.0f - t.wy) * (v01 - v00) + t.wy * (v11 - v10));
              }
            }
          }
      });
}

// Channel-stacks same-(B, H, W) tensors, in order.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: nothing to concatenate");
  for (const auto& p : parts) detail::require_rank(p, 4, "concat_channels");
  const auto& ref = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.dim(0) != ref[0] || p.dim(2) != ref[2] || p.dim(3) != ref[3]) {
      throw ShapeError("concat_channels: spatial/batch mismatch between " + shape_str(ref) +
                       " and " + shape_str(p.shape()));
    }
    total += p.dim(1);
  }
  const std::size_t batch = ref[0], plane = ref[2] * ref[3];
  std::vector<float> out(batch * total * plane);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t chunk = p.dim(1) * plane;
    for (std::size_t b = 0; b < batch; ++b) {
      std::copy_n(p.data().data() + b * chunk, chunk, out.data() + (b * total + off) * plane);
    }
    off += p.dim(1);
  }
  Tensor result(Shape{batch, total, ref[2], ref[3]}, std::move(out));
  if (!grad_enabled()) return result;
  bool needs = false;
  for (const auto& p : parts) needs = needs || p.requires_grad();
  if (!needs) return result;
  auto* node = result.node();
  node->requires_grad = true;
  for (const auto& p : parts) node->parents.push_back(p.node_ptr());
  node->backward = [batch, total, plane, offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      auto* g = grad_sink(self, k);
      if (!g) continue;
      const std::size_t chunk = self.parents[k]->shape[1] * plane;
      for (std::size_t b = 0; b < batch; ++b) {
        const float* src = self.grad.data() + (b * total + offsets[k]) * plane;
        float* dst = g->data() + b * chunk;
        for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
      }
    }
  };
  return result;
}

inline Tensor concat_channels(const Tensor& a, const Tensor& b) { return concat_channels({a, b}); }

inline Tensor slice_channels(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_rank(x, 4, "slice_channels");
  const detail::Dims4 d(x.shape());
  if (start + count > d.c) {
    throw ShapeError("slice_channels: [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " + shape_str(x.shape()));
  }
  const std::size_t plane = d.plane();
  std::vector<float> out(d.b * count * plane);
  for (std::size_t b = 0; b < d.b; ++b) {
    std::copy_n(x.data().data() + (b * d.c + start) * plane, count * plane,
                out.data() + b * count * plane);
  }
  return make_result({d.b, count, d.h, d.w}, std::move(out), {x},
                     [d, plane, start, count](detail::Node& self) {
                       auto* gx = grad_sink(self, 0);
                       if (!gx) return;
                       for (std::size_t b = 0; b < d.b; ++b) {
                         const float* src = self.grad.data() + b * count * plane;
                         float* dst = gx->data() + (b * d.c + start) * plane;
                         for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                       }
                     });
}

inline Tensor upsample_nearest2x(const Tensor& x) {
  detail::require_rank(x, 4, "upsample_nearest2x");
  const detail::Dims4 d(x.shape());
  const std::size_t oh = d.h * 2, ow = d.w * 2;
  std::vector<float> out(d.b * d.c * oh * ow);
  for (std::size_t bc = 0; bc < d.b * d.c; ++bc)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(bc * oh + y) * ow + xx] = x.data()[(bc * d.h + y / 2) * d.w + xx / 2];
  return make_result({d.b, d.c, oh, ow}, std::move(out), {x}, [d, oh, ow](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    for (std::size_t bc = 0; bc < d.b * d.c; ++bc)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          (*gx)[(bc * d.h + y / 2) * d.w + xx / 2] += self.grad[(bc * oh + y) * ow + xx];
  });
}

// Mirrors along axis 2 (vertical) or 3 (horizontal).
inline Tensor flip(const Tensor& x, std::size_t axis) {
  detail::require_rank(x, 4, "flip");
  if (axis != 2 && axis != 3) throw ShapeError("flip: axis must be 2 or 3");
  const detail::Dims4 d(x.shape());
  auto src_index = [d, axis](std::size_t i) {
    const std::size_t w = i % d.w, h = (i / d.w) % d.h, bc = i / d.plane();
    return axis == 3 ? (bc * d.h + h) * d.w + (d.w - 1 - w) : (bc * d.h + (d.h - 1 - h)) * d.w + w;
  };
  std::vector<float> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[src_index(i)];
  return make_result(x.shape(), std::move(out), {x}, [src_index](detail::Node& self) {
    auto* gx = grad_sink(self, 0);
    if (!gx) return;
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*gx)[src_index(i)] += self.grad[i];
  });
}

}  // namespace mdrwkv
