// mdrwkv: phantom generation, training, evaluation, ablation runs and the WKV
// scaling benchmark.

#include <cstdint>
#include <exception>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "mdrwkv/commands.hpp"

int main(int argc, char** argv) {
  CLI::App app{"MD-RWKV-UNet segmentation toolkit"};
  app.require_subcommand(1);

  std::size_t count = 10, size = 64, classes = 4;
  std::uint64_t seed = 0;
  std::string out;
  auto* gen = app.add_subcommand("gen-phantoms", "Write synthetic phantoms and a manifest");
  gen->add_option("--count", count, "Number of samples")->capture_default_str();
  gen->add_option("--size", size, "Image side in pixels")->capture_default_str();
  gen->add_option("--classes", classes, "Classes including background")->capture_default_str();
  gen->add_option("--seed", seed, "Generator seed")->capture_default_str();
  gen->add_option("--out", out, "Output directory")->required();

  std::string config;
  auto* train = app.add_subcommand("train", "Train from a JSON run config");
  train->add_option("--config", config, "Run config (JSON)")->required();
  train->add_option("--out", out, "Run directory")->required();

  std::string checkpoint, data;
  bool tta = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "model.ckpt from a run directory")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_flag("--tta", tta, "Average over flips");

  std::string variant;
  auto* ablate = app.add_subcommand("ablate", "Train one ablation variant");
  ablate->add_option("--variant", variant, "ver1..ver8")->required();
  ablate->add_option("--config", config, "Run config (JSON)")->required();
  ablate->add_option("--out", out, "Run directory")->required();

  std::size_t channels = 8, repeats = 5;
  std::vector<std::size_t> lengths{1024, 2048, 4096, 8192};
  auto* bench = app.add_subcommand("bench-wkv", "Time scan vs naive WKV (CSV on stdout)");
  bench->add_option("--channels", channels, "Channels")->capture_default_str();
  bench->add_option("--lengths", lengths, "Sequence lengths")->delimiter(',')->capture_default_str();
  bench->add_option("--repeats", repeats, "Timed runs per point")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      mdrwkv::cmd_gen_phantoms(count, size, classes, seed, out);
    } else if (*train) {
      mdrwkv::cmd_train(config, out, &std::cerr);
    } else if (*eval) {
      mdrwkv::cmd_eval(checkpoint, data, tta, std::cout);
    } else if (*ablate) {
      mdrwkv::cmd_ablate(variant, config, out, &std::cerr);
    } else if (*bench) {
      mdrwkv::cmd_bench_wkv(channels, lengths, repeats, std::cout);
    }
  } catch (const std::exception& e) {
    std::cerr << "mdrwkv: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
