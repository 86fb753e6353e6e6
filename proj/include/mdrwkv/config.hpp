#pragma once

// Run configuration as JSON with sections model, optim, data and eval.
// Unknown keys are rejected by name; absent keys keep their defaults.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mdrwkv/network.hpp"
#include "mdrwkv/training.hpp"

namespace mdrwkv {

using json = nlohmann::ordered_json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  std::string train;  // dataset directory
  std::string val;    // optional held-out directory
  std::size_t batch_size = 24;
  std::size_t epochs = 30;
  std::uint64_t seed = 0;
  bool augment = true;
};

struct EvalConfig {
  bool tta = false;
};

struct RunConfig {
  ModelConfig model;
  OptimHyper optim;
  DataConfig data;
  EvalConfig eval;
};

inline const char* norm_mode_name(NormMode m) { return m == NormMode::batch ? "batch" : "layer"; }

inline NormMode parse_norm_mode(const std::string& s) {
  if (s == "layer") return NormMode::layer;
  if (s == "batch") return NormMode::batch;
  throw ConfigError("model.norm_mode must be \"layer\" or \"batch\", got \"" + s + "\"");
}

inline json to_json(const ModelConfig& m) {
  return json{{"num_classes", m.num_classes},
              {"in_channels", m.in_channels},
              {"stages", m.stages},
              {"channels", m.channels},
              {"blocks_per_stage", m.blocks_per_stage},
              {"image_size", m.image_size},
              {"use_sk_attention", m.use_sk_attention},
              {"use_deformable_shift", m.use_deformable_shift},
              {"use_cross_stage_fusion", m.use_cross_stage_fusion},
              {"drop_path_rate", m.drop_path_rate},
              {"norm_mode", norm_mode_name(m.norm_mode)}};
}

inline json to_json(const RunConfig& c) {
  json j;
  j["model"] = to_json(c.model);
  j["optim"] = json{{"lr0", c.optim.lr0},
                    {"lr_min", c.optim.lr_min},
                    {"betas", {c.optim.beta1, c.optim.beta2}},
                    {"eps", c.optim.eps},
                    {"weight_decay", c.optim.weight_decay},
                    {"clip_norm", c.optim.clip_norm}};
  j["data"] = json{{"train", c.data.train},
                   {"val", c.data.val},
                   {"batch_size", c.data.batch_size},
                   {"epochs", c.data.epochs},
                   {"seed", c.data.seed},
                   {"augment", c.data.augment}};
  j["eval"] = json{{"tta", c.eval.tta}};
  return j;
}

namespace detail {

inline void reject_unknown(const json& obj, const std::string& where, const std::set<std::string>& known) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (!known.count(key)) {
      throw ConfigError("unknown config key \"" + (where.empty() ? key : where + "." + key) + "\"");
    }
  }
}

template <class T>
void read_key(const json& obj, const std::string& where, const char* key, T& out) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("config key \"" + where + "." + key + "\" has the wrong type");
  }
}

}  // namespace detail

inline ModelConfig model_config_from_json(const json& j) {
  detail::reject_unknown(j, "model",
                         {"num_classes", "in_channels", "stages", "channels", "blocks_per_stage", "image_size",
                          "use_sk_attention", "use_deformable_shift", "use_cross_stage_fusion", "drop_path_rate",
                          "norm_mode"});
  ModelConfig m;
  detail::read_key(j, "model", "num_classes", m.num_classes);
  detail::read_key(j, "model", "in_channels", m.in_channels);
  detail::read_key(j, "model", "stages", m.stages);
  detail::read_key(j, "model", "channels", m.channels);
  detail::read_key(j, "model", "blocks_per_stage", m.blocks_per_stage);
  detail::read_key(j, "model", "image_size", m.image_size);
  detail::read_key(j, "model", "use_sk_attention", m.use_sk_attention);
  detail::read_key(j, "model", "use_deformable_shift", m.use_deformable_shift);
  detail::read_key(j, "model", "use_cross_stage_fusion", m.use_cross_stage_fusion);
  detail::read_key(j, "model", "drop_path_rate", m.drop_path_rate);
  std::string norm = norm_mode_name(m.norm_mode);
  detail::read_key(j, "model", "norm_mode", norm);
  m.norm_mode = parse_norm_mode(norm);
  // Shorter channel lists with the stage count left implicit follow the list.
  if (j.contains("channels") && !j.contains("stages")) m.stages = m.channels.size();
  if (j.contains("channels") && !j.contains("blocks_per_stage")) m.blocks_per_stage.assign(m.stages, 2);
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  return m;
}

inline RunConfig run_config_from_json(const json& j) {
  detail::reject_unknown(j, "", {"model", "optim", "data", "eval"});
  RunConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    detail::reject_unknown(o, "optim", {"lr0", "lr_min", "betas", "eps", "weight_decay", "clip_norm"});
    detail::read_key(o, "optim", "lr0", c.optim.lr0);
    detail::read_key(o, "optim", "lr_min", c.optim.lr_min);
    std::vector<double> betas{c.optim.beta1, c.optim.beta2};
    detail::read_key(o, "optim", "betas", betas);
    if (betas.size() != 2) throw ConfigError("optim.betas must have two entries");
    c.optim.beta1 = betas[0];
    c.optim.beta2 = betas[1];
    detail::read_key(o, "optim", "eps", c.optim.eps);
    detail::read_key(o, "optim", "weight_decay", c.optim.weight_decay);
    detail::read_key(o, "optim", "clip_norm", c.optim.clip_norm);
    if (!(c.optim.lr0 > c.optim.lr_min) || c.optim.lr_min < 0.0) {
      throw ConfigError("optim: need lr0 > lr_min >= 0");
    }
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    detail::reject_unknown(d, "data", {"train", "val", "batch_size", "epochs", "seed", "augment"});
    detail::read_key(d, "data", "train", c.data.train);
    detail::read_key(d, "data", "val", c.data.val);
    detail::read_key(d, "data", "batch_size", c.data.batch_size);
    detail::read_key(d, "data", "epochs", c.data.epochs);
    detail::read_key(d, "data", "seed", c.data.seed);
    detail::read_key(d, "data", "augment", c.data.augment);
    if (c.data.batch_size == 0) throw ConfigError("data.batch_size must be >= 1");
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    detail::reject_unknown(e, "eval", {"tta"});
    detail::read_key(e, "eval", "tta", c.eval.tta);
  }
  return c;
}

// Relative data paths are taken from the config file's directory.
inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  auto c = run_config_from_json(j);
  const auto base = path.parent_path();
  for (auto* p : {&c.data.train, &c.data.val}) {
    if (!p->empty() && std::filesystem::path(*p).is_relative()) *p = (base / *p).lexically_normal().string();
  }
  return c;
}

}  // namespace mdrwkv
