#pragma once

// Parameterized layers and the four architectural units built from them:
// deformable shift, the dual-path RWKV block, selective-kernel attention and
// cross-stage fusion. Every layer exposes its tensors through collect() so the
// network can name them for checkpoints and the optimizer.

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdrwkv/ops.hpp"
#include "mdrwkv/random.hpp"
#include "mdrwkv/tensor.hpp"
#include "mdrwkv/wkv.hpp"

namespace mdrwkv {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Trainable parameters plus persistent non-trainable state (running stats).
struct ParamCollector {
  std::vector<NamedTensor> params;
  std::vector<NamedTensor> buffers;

  void param(const std::string& name, const Tensor& t) {
    if (t.defined()) params.push_back({name, t});
  }
  void buffer(const std::string& name, const Tensor& t) {
    if (t.defined()) buffers.push_back({name, t});
  }
};

// Per-call state: stochastic layers draw from rng only in training mode.
struct Pass {
  bool training = false;
  Rng* rng = nullptr;
};

// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
inline Tensor kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  std::vector<float> v(numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return Tensor::parameter(std::move(shape), std::move(v));
}

struct Conv {
  Tensor weight;  // [Cout, Cin, k, k]
  Tensor bias;    // [Cout] or undefined
  std::size_t stride = 1, padding = 0;

  static Conv make(std::size_t cin, std::size_t cout, std::size_t k, Rng& rng, bool with_bias = true,
                   std::size_t stride = 1) {
    Conv c;
    const std::size_t fan_in = cin * k * k;
    c.weight = kaiming_uniform({cout, cin, k, k}, fan_in, rng);
    if (with_bias) c.bias = kaiming_uniform({cout}, fan_in, rng);
    c.stride = stride;
    c.padding = k / 2;
    return c;
  }

  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, stride, padding); }

  void collect(const std::string& prefix, ParamCollector& out) const {
    out.param(prefix + "weight", weight);
    out.param(prefix + "bias", bias);
  }
};

struct DepthwiseConv {
  Tensor weight;  // [C, 1, k, k]
  Tensor bias;

  static DepthwiseConv make(std::size_t channels, std::size_t k, Rng& rng, bool with_bias = true) {
    DepthwiseConv c;
    c.weight = kaiming_uniform({channels, 1, k, k}, k * k, rng);
    if (with_bias) c.bias = kaiming_uniform({channels}, k * k, rng);
    return c;
  }

  Tensor operator()(const Tensor& x) const {
    return depthwise_conv2d(x, weight, bias, weight.dim(2) / 2);
  }

  void collect(const std::string& prefix, ParamCollector& out) const {
    out.param(prefix + "weight", weight);
    out.param(prefix + "bias", bias);
  }
};

// Layer norm over channels, or batch norm with running statistics that are
// used in eval mode.
struct Norm {
  NormMode mode = NormMode::layer;
  Tensor scale, bias;
  Tensor running_mean, running_var;  // batch mode only
  float momentum = 0.1f;

  static Norm make(std::size_t channels, NormMode mode) {
    Norm n;
    n.mode = mode;
    n.scale = Tensor::parameter({channels}, std::vector<float>(channels, 1.0f));
    n.bias = Tensor::parameter({channels}, std::vector<float>(channels, 0.0f));
    if (mode == NormMode::batch) {
      n.running_mean = Tensor::zeros({channels});
      n.running_var = Tensor::full({channels}, 1.0f);
    }
    return n;
  }

  Tensor operator()(const Tensor& x, const Pass& pass) const {
    if (mode == NormMode::layer) return normalize(x, NormMode::layer, scale, bias);
    if (pass.training) {
      update_running_stats(x);
      return normalize(x, NormMode::batch, scale, bias);
    }
    const std::size_t C = scale.numel();
    std::vector<float> inv(C), shift(C);
    for (std::size_t c = 0; c < C; ++c) {
      inv[c] = 1.0f / std::sqrt(running_var.data()[c] + kNormEps);
      shift[c] = -running_mean.data()[c];
    }
    auto centered = add(x, Tensor({1, C, 1, 1}, std::move(shift)));
    auto gain = mul(reshape(scale, {1, C, 1, 1}), Tensor({1, C, 1, 1}, std::move(inv)));
    return add(mul(centered, gain), reshape(bias, {1, C, 1, 1}));
  }

  void collect(const std::string& prefix, ParamCollector& out) const {
    out.param(prefix + "scale", scale);
    out.param(prefix + "bias", bias);
    out.buffer(prefix + "running_mean", running_mean);
    out.buffer(prefix + "running_var", running_var);
  }

 private:
  void update_running_stats(const Tensor& x) const {
    const detail::Dims4 d(x.shape());
    const std::size_t n = d.b * d.plane();
    auto rm = Tensor(running_mean).mutable_data();
    auto rv = Tensor(running_var).mutable_data();
    for (std::size_t c = 0; c < d.c; ++c) {
      double s = 0.0, s2 = 0.0;
      for (std::size_t b = 0; b < d.b; ++b) {
        const float* p = x.data().data() + (b * d.c + c) * d.plane();
        for (std::size_t i = 0; i < d.plane(); ++i) {
          s += p[i];
          s2 += static_cast<double>(p[i]) * p[i];
        }
      }
      const double m = s / static_cast<double>(n);
      double var = std::max(0.0, s2 / static_cast<double>(n) - m * m);
      if (n > 1) var *= static_cast<double>(n) / static_cast<double>(n - 1);
      rm[c] = static_cast<float>((1.0 - momentum) * rm[c] + momentum * m);
      rv[c] = static_cast<float>((1.0 - momentum) * rv[c] + momentum * var);
    }
  }
};

// Stochastic depth: each sample's branch is kept with probability 1 - rate
// and rescaled by 1 / (1 - rate).
inline Tensor drop_path(const Tensor& x, float rate, const Pass& pass) {
  if (rate < 0.0f || rate > 1.0f) throw std::invalid_argument("drop_path: rate must be in [0, 1]");
  if (!pass.training || rate == 0.0f) return x;
  const std::size_t B = x.dim(0);
  std::vector<float> keep(B, 0.0f);
  if (rate < 1.0f) {
    if (!pass.rng) throw std::logic_error("drop_path: training pass without rng");
    for (auto& k : keep) k = pass.rng->bernoulli(1.0 - rate) ? 1.0f / (1.0f - rate) : 0.0f;
  }
  Shape mask_shape(x.rank(), 1);
  mask_shape[0] = B;
  return mul(x, Tensor(std::move(mask_shape), std::move(keep)));
}

// Resamples x at p + offset(p); the offset field comes from a 3x3 conv and
// starts at zero, which makes the initial shift an exact identity.
struct DeformableShift {
  Conv offset;  // C -> 2 (dy, dx)

  static DeformableShift make(std::size_t channels) {
    DeformableShift s;
    s.offset.weight = Tensor::parameter({2, channels, 3, 3}, std::vector<float>(18 * channels, 0.0f));
    s.offset.bias = Tensor::parameter({2}, {0.0f, 0.0f});
    s.offset.padding = 1;
    return s;
  }

  // Shift by an externally supplied offset field [B, 2, H, W].
  static Tensor apply(const Tensor& x, const Tensor& offsets) {
    return bilinear_sample(x, offsets, true);
  }

  Tensor operator()(const Tensor& x) const { return apply(x, offset(x)); }

  void collect(const std::string& prefix, ParamCollector& out) const {
    offset.collect(prefix + "offset.", out);
  }
};

struct MdRwkvBlockConfig {
  std::size_t c_in = 16;
  std::size_t c_mid = 16;
  NormMode norm_mode = NormMode::layer;
  float drop_path_rate = 0.0f;
  std::size_t dw_kernel = 3;
  bool deformable_shift = true;
};

// out = x + drop_path(fuse(concat(local(x'), rwkv(x')))), x' = proj(norm(x)).
// The dynamic path: shift -> k, v, r gates -> WKV -> sigmoid(r) * y -> norm
// -> linear. The three gates share one 1x1 conv producing 3C' channels.
struct MdRwkvBlock {
  MdRwkvBlockConfig config;
  Norm norm_in;
  Conv proj_in;
  Tensor local_dw, local_pw;
  std::optional<DeformableShift> shift;
  Conv gates;
  WkvParams wkv;
  Norm norm_out;
  Conv linear;
  Conv fuse;  // 2C' -> C, no bias

  static MdRwkvBlock make(const MdRwkvBlockConfig& cfg, Rng& rng) {
    if (cfg.c_mid == 0) throw std::invalid_argument("MdRwkvBlock: c_mid must be >= 1");
    if (cfg.dw_kernel % 2 == 0) throw std::invalid_argument("MdRwkvBlock: dw_kernel must be odd");
    if (cfg.drop_path_rate < 0.0f || cfg.drop_path_rate > 1.0f) {
      throw std::invalid_argument("MdRwkvBlock: drop_path_rate must be in [0, 1]");
    }
    const std::size_t c = cfg.c_in, m = cfg.c_mid, k = cfg.dw_kernel;
    MdRwkvBlock b;
    b.config = cfg;
    b.norm_in = Norm::make(c, cfg.norm_mode);
    b.proj_in = Conv::make(c, m, 1, rng);
    b.local_dw = kaiming_uniform({m, 1, k, k}, k * k, rng);
    b.local_pw = kaiming_uniform({m, m, 1, 1}, m, rng);
    if (cfg.deformable_shift) b.shift = DeformableShift::make(m);
    b.gates = Conv::make(m, 3 * m, 1, rng);
    b.wkv = WkvParams::multi_timescale(m);
    b.norm_out = Norm::make(m, cfg.norm_mode);
    b.linear = Conv::make(m, m, 1, rng);
    b.fuse = Conv::make(2 * m, c, 1, rng, false);
    return b;
  }

  Tensor dynamic_path(const Tensor& xp, const Pass& pass) const {
    const std::size_t m = config.c_mid, H = xp.dim(2), W = xp.dim(3);
    const Tensor shifted = shift ? (*shift)(xp) : xp;
    const Tensor g = gates(shifted);
    const auto k = flatten_raster(slice_channels(g, 0, m));
    const auto v = flatten_raster(slice_channels(g, m, m));
    const auto r = slice_channels(g, 2 * m, m);
    const auto y = unflatten_raster(mdrwkv::wkv(k, v, wkv), H, W);
    return linear(norm_out(mul(sigmoid(r), y), pass));
  }

  Tensor branch(const Tensor& x, const Pass& pass) const {
    if (x.rank() != 4 || x.dim(1) != config.c_in) {
      throw ShapeError("MdRwkvBlock: expected " + std::to_string(config.c_in) +
                       " input channels, got " + shape_str(x.shape()));
    }
    const auto xp = proj_in(norm_in(x, pass));
    const auto local = depthwise_separable_conv(xp, local_dw, local_pw);
    return fuse(concat_channels(local, dynamic_path(xp, pass)));
  }

  Tensor operator()(const Tensor& x, const Pass& pass) const {
    return add(x, drop_path(branch(x, pass), config.drop_path_rate, pass));
  }

  void collect(const std::string& prefix, ParamCollector& out) const {
    norm_in.collect(prefix + "norm_in.", out);
    proj_in.collect(prefix + "proj_in.", out);
    out.param(prefix + "local.dw", local_dw);
    out.param(prefix + "local.pw", local_pw);
    if (shift) shift->collect(prefix + "shift.", out);
    gates.collect(prefix + "gates.", out);
    out.param(prefix + "wkv.w_raw", wkv.w_raw);
    out.param(prefix + "wkv.u", wkv.u);
    norm_out.collect(prefix + "norm_out.", out);
    linear.collect(prefix + "linear.", out);
    fuse.collect(prefix + "fuse.", out);
  }
};

struct SkConfig {
  std::vector<std::size_t> kernel_sizes{3, 5};
  std::size_t reduction = 8;
};

// Selective kernel: depthwise branches of different sizes blended per channel
// by a softmax over branches computed from the pooled sum of all branches.
struct SkAttention {
  std::vector<DepthwiseConv> branches;
  Conv squeeze;                // C -> d, then ReLU
  std::vector<Conv> selectors;  // d -> C per branch, no bias

  static SkAttention make(std::size_t channels, const SkConfig& cfg, Rng& rng) {
    if (cfg.kernel_sizes.empty()) throw std::invalid_argument("SkAttention: no branches");
    if (cfg.reduction == 0) throw std::invalid_argument("SkAttention: reduction must be >= 1");
    SkAttention sk;
    for (auto k : cfg.kernel_sizes) {
      if (k % 2 == 0) throw std::invalid_argument("SkAttention: kernel sizes must be odd");
      sk.branches.push_back(DepthwiseConv::make(channels, k, rng));
    }
    const std::size_t d = std::max<std::size_t>(channels / cfg.reduction, 4);
    sk.squeeze = Conv::make(channels, d, 1, rng);
    for (std::size_t i = 0; i < cfg.kernel_sizes.size(); ++i) {
      sk.selectors.push_back(Conv::make(d, channels, 1, rng, false));
    }
    return sk;
  }

  std::vector<Tensor> branch_outputs(const Tensor& x) const {
    std::vector<Tensor> out;
    for (const auto& b : branches) out.push_back(b(x));
    return out;
  }

  // Per-branch weights [B, C, 1, 1]; they sum to one over branches.
  std::vector<Tensor> selection(const std::vector<Tensor>& outs) const {
    Tensor total = outs[0];
    for (std::size_t i = 1; i < outs.size(); ++i) total = add(total, outs[i]);
    const std::size_t B = total.dim(0), C = total.dim(1), n = outs.size();
    const auto z = relu(squeeze(detail::global_avg_pool_keepdims(total)));
    std::vector<Tensor> logits;
    for (const auto& s : selectors) logits.push_back(reshape(s(z), {B, 1, C, 1}));
    const auto weights = softmax(concat_channels(logits), 1);
    std::vector<Tensor> w;
    for (std::size_t i = 0; i < n; ++i) w.push_back(reshape(slice_channels(weights, i, 1), {B, C, 1, 1}));
    return w;
  }

  Tensor operator()(const Tensor& x) const {
    const auto outs = branch_outputs(x);
    const auto w = selection(outs);
    Tensor y = mul(outs[0], w[0]);
    for (std::size_t i = 1; i < outs.size(); ++i) y = add(y, mul(outs[i], w[i]));
    return y;
  }

  void collect(const std::string& prefix, ParamCollector& out) const {
    for (std::size_t i = 0; i < branches.size(); ++i) {
      branches[i].collect(prefix + "branch" + std::to_string(i) + ".", out);
      selectors[i].collect(prefix + "select" + std::to_string(i) + ".", out);
    }
    squeeze.collect(prefix + "squeeze.", out);
  }
};

// F_out = (a_l * s) * F_l + (a_h * (1 - s)) * F_h, with a_l, a_h, s all
// [B, 1, H, W] and broadcast over channels.
inline Tensor fuse_weighted(const Tensor& f_low, const Tensor& f_high, const Tensor& alpha_low,
                            const Tensor& alpha_high, const Tensor& s) {
  return add(mul(mul(alpha_low, s), f_low), mul(mul(alpha_high, one_minus(s)), f_high));
}

// Dual attention over a low-level map and a spatially aligned high-level map.
// Channel weights come from a two-layer 1x1 bottleneck over the concatenation;
// the spatial mask from a 7x7 conv over its channel mean and max. The
// high-level map is projected to the low-level channel count before blending.
struct CrossStageFusion {
  Conv mix1;     // C_l + C_h -> (C_l + C_h) / 2
  Conv mix2;     // -> 2
  Conv spatial;  // 2 -> 1, 7x7
  Conv project;  // C_h -> C_l

  static CrossStageFusion make(std::size_t c_low, std::size_t c_high, Rng& rng) {
    const std::size_t cat = c_low + c_high;
    CrossStageFusion f;
    f.mix1 = Conv::make(cat, std::max<std::size_t>(cat / 2, 1), 1, rng);
    f.mix2 = Conv::make(f.mix1.weight.dim(0), 2, 1, rng);
    // Both channel weights start near one so the initial blend is s*F_l + (1-s)*F_h.
    f.mix2.bias = Tensor::parameter({2}, {1.0f, 1.0f});
    f.spatial = Conv::make(2, 1, 7, rng);
    f.project = Conv::make(c_high, c_low, 1, rng);
    return f;
  }

  struct Attention {
    Tensor alpha_low, alpha_high, s;
  };

  Attention attention(const Tensor& f_low, const Tensor& f_high) const {
    if (f_low.rank() != 4 || f_high.rank() != 4 || f_low.dim(0) != f_high.dim(0) ||
        f_low.dim(2) != f_high.dim(2) || f_low.dim(3) != f_high.dim(3)) {
      throw ShapeError("CrossStageFusion: low " + shape_str(f_low.shape()) + " and high " +
                       shape_str(f_high.shape()) + " are not spatially aligned");
    }
    const auto cat = concat_channels(f_low, f_high);
    const auto a = mix2(relu(mix1(cat)));
    const auto stats = concat_channels(pool(cat, PoolKind::channel_avg), pool(cat, PoolKind::channel_max));
    return {slice_channels(a, 0, 1), slice_channels(a, 1, 1), sigmoid(spatial(stats))};
  }

  Tensor operator()(const Tensor& f_low, const Tensor& f_high) const {
    const auto att = attention(f_low, f_high);
    return fuse_weighted(f_low, project(f_high), att.alpha_low, att.alpha_high, att.s);
  }

  void collect(const std::string& prefix, ParamCollector& out) const {
    mix1.collect(prefix + "mix1.", out);
    mix2.collect(prefix + "mix2.", out);
    spatial.collect(prefix + "spatial.", out);
    project.collect(prefix + "project.", out);
  }
};

}  // namespace mdrwkv
