#pragma once

// U-shaped segmentation network. The encoder is a stem at full resolution
// followed by stride-2 stages of RWKV blocks (selective-kernel attention after
// the blocks of the first two stages). Skips are either plain or fused with
// the next-deeper fused skip; the decoder upsamples, concatenates the skip and
// applies conv3x3 + norm + ReLU; a 1x1 head emits per-pixel logits.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdrwkv/blocks.hpp"
#include "mdrwkv/ops.hpp"
#include "mdrwkv/random.hpp"
#include "mdrwkv/tensor.hpp"

namespace mdrwkv {

struct ModelConfig {
  std::size_t num_classes = 9;
  std::size_t in_channels = 1;
  std::size_t stages = 4;
  std::vector<std::size_t> channels{32, 64, 128, 256};
  std::vector<std::size_t> blocks_per_stage{2, 2, 2, 2};
  std::size_t image_size = 224;
  bool use_sk_attention = true;
  bool use_deformable_shift = true;
  bool use_cross_stage_fusion = true;
  double drop_path_rate = 0.0;
  NormMode norm_mode = NormMode::layer;

  void validate() const {
    auto fail = [](const std::string& msg) { throw std::invalid_argument("ModelConfig: " + msg); };
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (in_channels < 1) fail("in_channels must be >= 1");
    if (stages < 1) fail("stages must be >= 1");
    if (channels.size() != stages) fail("channels has " + std::to_string(channels.size()) +
                                        " entries for " + std::to_string(stages) + " stages");
    if (blocks_per_stage.size() != stages) {
      fail("blocks_per_stage has " + std::to_string(blocks_per_stage.size()) + " entries for " +
           std::to_string(stages) + " stages");
    }
    for (auto c : channels)
      if (c == 0) fail("channels must be >= 1");
    const std::size_t factor = std::size_t{1} << (stages - 1);
    if (image_size == 0 || image_size % factor != 0) {
      fail("image_size " + std::to_string(image_size) + " is not divisible by " +
           std::to_string(factor));
    }
    if (drop_path_rate < 0.0 || drop_path_rate > 1.0) fail("drop_path_rate must be in [0, 1]");
  }
};

// Toggles of the eight ablation variants: (sk, shift, fusion).
struct Variant {
  bool sk_attention, deformable_shift, cross_stage_fusion;
};

inline Variant ablation_variant(int version) {
  switch (version) {
    case 1: return {false, false, false};
    case 2: return {true, false, false};
    case 3: return {false, true, false};
    case 4: return {false, false, true};
    case 5: return {true, true, false};
    case 6: return {true, false, true};
    case 7: return {false, true, true};
    case 8: return {true, true, true};
  }
  throw std::invalid_argument("unknown variant ver" + std::to_string(version) + " (expected ver1..ver8)");
}

inline ModelConfig with_variant(ModelConfig cfg, int version) {
  const auto v = ablation_variant(version);
  cfg.use_sk_attention = v.sk_attention;
  cfg.use_deformable_shift = v.deformable_shift;
  cfg.use_cross_stage_fusion = v.cross_stage_fusion;
  return cfg;
}

struct ConvNorm {
  Conv conv;
  Norm norm;
  bool relu_after = true;

  Tensor operator()(const Tensor& x, const Pass& pass) const {
    auto y = norm(conv(x), pass);
    return relu_after ? relu(y) : y;
  }

  void collect(const std::string& prefix, ParamCollector& out) const {
    conv.collect(prefix + "conv.", out);
    norm.collect(prefix + "norm.", out);
  }
};

struct Stage {
  std::optional<ConvNorm> down;  // absent for stage 0
  std::vector<MdRwkvBlock> blocks;
  std::optional<SkAttention> sk;
};

class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
    config_.validate();
    Rng rng(seed);
    const auto& ch = config_.channels;
    const std::size_t L = config_.stages;
    stem_ = {Conv::make(config_.in_channels, ch[0], 3, rng), Norm::make(ch[0], config_.norm_mode), true};

    std::size_t total_blocks = 0;
    for (auto n : config_.blocks_per_stage) total_blocks += n;
    std::size_t block_index = 0;
    for (std::size_t i = 0; i < L; ++i) {
      Stage st;
      if (i > 0) {
        st.down = ConvNorm{Conv::make(ch[i - 1], ch[i], 3, rng, true, 2),
                           Norm::make(ch[i], config_.norm_mode), false};
      }
      for (std::size_t j = 0; j < config_.blocks_per_stage[i]; ++j, ++block_index) {
        MdRwkvBlockConfig bc;
        bc.c_in = bc.c_mid = ch[i];
        bc.norm_mode = config_.norm_mode;
        bc.deformable_shift = config_.use_deformable_shift;
        const double frac = total_blocks > 1 ? static_cast<double>(block_index) / static_cast<double>(total_blocks - 1) : 1.0;
        bc.drop_path_rate = static_cast<float>(config_.drop_path_rate * frac);
        st.blocks.push_back(MdRwkvBlock::make(bc, rng));
      }
      if (config_.use_sk_attention && i < 2) st.sk = SkAttention::make(ch[i], SkConfig{}, rng);
      stages_.push_back(std::move(st));
    }
    if (config_.use_cross_stage_fusion) {
      for (std::size_t i = 0; i + 1 < L; ++i) fusions_.push_back(CrossStageFusion::make(ch[i], ch[i + 1], rng));
    }
    for (std::size_t i = 0; i + 1 < L; ++i) {
      decoders_.push_back({Conv::make(ch[i + 1] + ch[i], ch[i], 3, rng), Norm::make(ch[i], config_.norm_mode), true});
    }
    head_ = Conv::make(ch[0], config_.num_classes, 1, rng);
  }

  const ModelConfig& config() const { return config_; }

  void check_input(const Tensor& x) const {
    const std::size_t S = config_.image_size;
    if (x.rank() != 4 || x.dim(1) != config_.in_channels || x.dim(2) != S || x.dim(3) != S) {
      throw ShapeError("model input " + shape_str(x.shape()) + " does not match expected [B, " +
                       std::to_string(config_.in_channels) + ", " + std::to_string(S) + ", " +
                       std::to_string(S) + "]");
    }
  }

  // Per-stage encoder features, shallowest first.
  std::vector<Tensor> encode(const Tensor& x, const Pass& pass) const {
    check_input(x);
    std::vector<Tensor> feats;
    Tensor h = stem_(x, pass);
    for (const auto& st : stages_) {
      if (st.down) h = (*st.down)(h, pass);
      for (const auto& b : st.blocks) h = b(h, pass);
      if (st.sk) h = add(h, (*st.sk)(h));
      feats.push_back(h);
    }
    return feats;
  }

  // Logits [B, K, S, S].
  Tensor forward(const Tensor& x, const Pass& pass = {}) const {
    const auto enc = encode(x, pass);
    const std::size_t L = enc.size();
    std::vector<Tensor> skips(enc);
    if (!fusions_.empty()) {
      for (std::size_t i = L - 1; i-- > 0;) skips[i] = fusions_[i](enc[i], upsample_nearest2x(skips[i + 1]));
    }
    Tensor d = enc[L - 1];
    for (std::size_t i = L - 1; i-- > 0;) {
      d = decoders_[i](concat_channels(upsample_nearest2x(d), skips[i]), pass);
    }
    return head_(d);
  }

  // Channel-normalized deepest features averaged over space: [B, C_last].
  Tensor global_descriptor(const Tensor& x, const Pass& pass = {}) const { return describe(encode(x, pass).back()); }

  static Tensor describe(const Tensor& deepest) {
    const std::size_t C = deepest.dim(1);
    const auto normed = normalize(deepest, NormMode::layer, Tensor::full({C}, 1.0f), Tensor::zeros({C}));
    return pool(normed, PoolKind::global_avg);
  }

  ParamCollector collect() const {
    ParamCollector out;
    stem_.collect("stem.", out);
    for (std::size_t i = 0; i < stages_.size(); ++i) {
      const std::string p = "stage" + std::to_string(i) + ".";
      if (stages_[i].down) stages_[i].down->collect(p + "down.", out);
      for (std::size_t j = 0; j < stages_[i].blocks.size(); ++j) {
        stages_[i].blocks[j].collect(p + "block" + std::to_string(j) + ".", out);
      }
      if (stages_[i].sk) stages_[i].sk->collect(p + "sk.", out);
    }
    for (std::size_t i = 0; i < fusions_.size(); ++i) fusions_[i].collect("fusion" + std::to_string(i) + ".", out);
    for (std::size_t i = 0; i < decoders_.size(); ++i) decoders_[i].collect("decoder" + std::to_string(i) + ".", out);
    head_.collect("head.", out);
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> ps;
    for (auto& p : collect().params) ps.push_back(p.tensor);
    return ps;
  }

  // Parameters grouped by the leading name component (stem, stageN, fusionN, ...).
  std::map<std::string, std::vector<NamedTensor>> parameter_groups() const {
    std::map<std::string, std::vector<NamedTensor>> groups;
    for (auto& p : collect().params) groups[p.name.substr(0, p.name.find('.'))].push_back(p);
    return groups;
  }

  void zero_grad() const {
    for (auto& p : parameters()) p.zero_grad();
  }

  const std::vector<Stage>& stages() const { return stages_; }
  const std::vector<CrossStageFusion>& fusions() const { return fusions_; }

 private:
  ModelConfig config_;
  ConvNorm stem_;
  std::vector<Stage> stages_;
  std::vector<CrossStageFusion> fusions_;
  std::vector<ConvNorm> decoders_;
  Conv head_;
};

inline Model build_model(const ModelConfig& config, std::uint64_t seed) { return Model(config, seed); }

// Trainable scalars only; running statistics are buffers.
inline std::size_t param_count(const ParamCollector& c) {
  std::size_t n = 0;
  for (const auto& p : c.params) n += p.tensor.numel();
  return n;
}

inline std::size_t param_count(const Model& model) { return param_count(model.collect()); }

}  // namespace mdrwkv
