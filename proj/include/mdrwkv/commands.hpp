#pragma once

// Implementations behind the mdrwkv command-line tool. Each command throws on
// failure; the executable maps exceptions to a message and a nonzero exit.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "mdrwkv/checkpoint.hpp"
#include "mdrwkv/config.hpp"
#include "mdrwkv/data_io.hpp"
#include "mdrwkv/metrics.hpp"
#include "mdrwkv/network.hpp"
#include "mdrwkv/training.hpp"
#include "mdrwkv/wkv.hpp"

namespace mdrwkv {

namespace fs = std::filesystem;

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

inline void cmd_gen_phantoms(std::size_t count, std::size_t size, std::size_t classes, std::uint64_t seed,
                             const fs::path& out) {
  PhantomConfig cfg;
  cfg.size = size;
  cfg.num_classes = classes;
  write_dataset(out, generate_phantoms(cfg, count, seed));
}

struct TrainSummary {
  std::size_t steps = 0;
  float final_loss = 0.0f;
  fs::path checkpoint;
};

// Writes config.json, loss.csv, model.ckpt and model.json into out.
inline TrainSummary train_run(const RunConfig& cfg, const fs::path& out, std::ostream* progress = nullptr) {
  if (cfg.data.train.empty()) throw ConfigError("data.train is not set");
  const Dataset data(cfg.data.train);
  if (data.size() == 0) throw std::invalid_argument("training set " + cfg.data.train + " is empty");
  fs::create_directories(out);
  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");

  Model model(cfg.model, cfg.data.seed);
  TrainOptions opts{cfg.data.epochs, cfg.data.batch_size, cfg.data.seed, cfg.data.augment};
  auto log = train(model, data, cfg.optim, opts, [&](const LossRecord& r) {
    if (progress && (r.step % 10 == 0)) *progress << "step " << r.step << " lr " << r.lr << " loss " << r.loss << '\n';
  });
  write_loss_csv(out / "loss.csv", log);
  TrainSummary s{log.size(), log.empty() ? 0.0f : log.back().loss, out / "model.ckpt"};
  save_checkpoint(s.checkpoint, model);
  json meta{{"config", to_json(cfg)}, {"step", log.size()}};
  write_text(out / "model.json", meta.dump(2) + "\n");
  return s;
}

inline TrainSummary cmd_train(const fs::path& config, const fs::path& out, std::ostream* progress = nullptr) {
  return train_run(load_run_config(config), out, progress);
}

// "ver1".."ver8" (case-insensitive) -> 1..8.
inline int parse_variant(std::string name) {
  std::transform(name.begin(), name.end(), name.begin(), [](unsigned char c) { return std::tolower(c); });
  if (name.size() == 4 && name.rfind("ver", 0) == 0 && name[3] >= '1' && name[3] <= '8') return name[3] - '0';
  throw std::invalid_argument("unknown variant \"" + name + "\" (expected ver1..ver8)");
}

inline TrainSummary cmd_ablate(const std::string& variant, const fs::path& config, const fs::path& out,
                               std::ostream* progress = nullptr) {
  const int v = parse_variant(variant);
  auto cfg = load_run_config(config);
  cfg.model = with_variant(cfg.model, v);
  return train_run(cfg, out, progress);
}

struct LoadedModel {
  RunConfig config;
  std::size_t step = 0;
  Model model;
};

// Reads the JSON sidecar next to the checkpoint (same stem, .json) to rebuild
// the model, then loads its tensors.
inline LoadedModel load_trained_model(const fs::path& checkpoint) {
  auto meta_path = checkpoint;
  meta_path.replace_extension(".json");
  std::ifstream is(meta_path);
  if (!is) throw std::runtime_error("missing checkpoint metadata " + meta_path.string());
  const auto meta = json::parse(is);
  auto cfg = run_config_from_json(meta.at("config"));
  LoadedModel lm{cfg, meta.value("step", std::size_t{0}), Model(cfg.model, cfg.data.seed)};
  load_checkpoint(checkpoint, lm.model);
  return lm;
}

template <class DatasetT>
void check_class_count(const DatasetT& data, std::size_t num_classes) {
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto s = data.get(i);
    const auto top = *std::max_element(s.mask.labels.begin(), s.mask.labels.end());
    if (top >= num_classes) {
      throw std::invalid_argument("class-count mismatch: sample " + s.id + " has label " + std::to_string(top) +
                                  " but the model predicts " + std::to_string(num_classes) + " classes");
    }
  }
}

template <class DatasetT>
MetricsReport evaluate_model(const Model& model, const DatasetT& data, bool tta) {
  const std::size_t K = model.config().num_classes;
  check_class_count(data, K);
  auto logits = [&](const Tensor& x) { return predict_logits(model, x); };
  if (tta) return evaluate([&](const Tensor& x) { return tta_predict(logits, x); }, data, K);
  return evaluate(logits, data, K);
}

// Writes metrics.json and metrics.txt next to the checkpoint; prints the JSON.
inline MetricsReport cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, bool tta, std::ostream& out) {
  const auto lm = load_trained_model(checkpoint);
  const Dataset data(data_dir);
  const auto report = evaluate_model(lm.model, data, tta);
  const auto dir = checkpoint.parent_path();
  const auto j = report.to_json().dump(2);
  write_text(dir / "metrics.json", j + "\n");
  write_text(dir / "metrics.txt", report.to_text());
  out << j << '\n';
  return report;
}

struct BenchRow {
  std::string impl;
  std::size_t length;
  double median_ns;
};

inline double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Checks scan against naive (max |diff| < 1e-5) at each length, then times both.
inline std::vector<BenchRow> cmd_bench_wkv(std::size_t channels, const std::vector<std::size_t>& lengths,
                                           std::size_t repeats, std::ostream& out) {
  if (channels == 0 || repeats == 0) throw std::invalid_argument("bench-wkv: channels and repeats must be >= 1");
  const auto params = WkvParams::multi_timescale(channels);
  const auto w = params.decay();
  Rng rng(7);
  std::vector<float> u(channels);
  for (auto& x : u) x = rng.uniform(-0.5f, 0.5f);
  std::vector<BenchRow> rows;
  for (auto T : lengths) {
    if (T == 0) throw std::invalid_argument("bench-wkv: lengths must be >= 1");
    std::vector<float> kv(2 * T * channels);
    for (auto& x : kv) x = rng.uniform(-1.0f, 1.0f);
    const Tensor k({1, T, channels}, std::vector<float>(kv.begin(), kv.begin() + T * channels));
    const Tensor v({1, T, channels}, std::vector<float>(kv.begin() + T * channels, kv.end()));

    const auto ys = wkv_forward_scan(k, v, w, u);
    const auto yn = wkv_forward_naive(k, v, w, u);
    float worst = 0.0f;
    for (std::size_t i = 0; i < ys.numel(); ++i) worst = std::max(worst, std::abs(ys.data()[i] - yn.data()[i]));
    if (!(worst < 1e-5f)) {
      throw std::runtime_error("bench-wkv: scan and naive disagree by " + std::to_string(worst) + " at T=" +
                               std::to_string(T));
    }
    auto time_it = [&](auto&& fn) {
      std::vector<double> ns;
      for (std::size_t r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        const Tensor y = fn();
        const auto t1 = std::chrono::steady_clock::now();
        ns.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
      }
      return median(ns);
    };
    const double scan_ns = time_it([&] { return wkv_forward_scan(k, v, w, u); });
    const double naive_ns = time_it([&] { return wkv_forward_naive(k, v, w, u); });
    rows.push_back({"scan", T, scan_ns});
    rows.push_back({"naive", T, naive_ns});
  }
  out << "impl,T,median_ns\n";
  for (const auto& r : rows) out << r.impl << ',' << r.length << ',' << static_cast<long long>(r.median_ns) << '\n';
  return rows;
}

}  // namespace mdrwkv
