#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include <gtest/gtest.h>

#include "mdrwkv/checkpoint.hpp"
#include "mdrwkv/data_io.hpp"
#include "mdrwkv/metrics.hpp"
#include "support/gradcheck.hpp"
#include "support/tempdir.hpp"

using namespace mdrwkv;
using mdrwkv::testing::random_tensor;
using mdrwkv::testing::slurp;
using mdrwkv::testing::spit;
using mdrwkv::testing::TempDir;

namespace {

std::string bytes(std::initializer_list<int> b) {
  std::string s;
  for (int v : b) s.push_back(static_cast<char>(v));
  return s;
}

void expect_format_error(const std::string& content, const std::string& fragment) {
  TempDir dir("mdt");
  spit(dir / "x.mdt", content);
  try {
    read_tensor(dir / "x.mdt");
    FAIL() << "expected FormatError containing " << fragment;
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
  }
}

std::size_t count_class(const LabelMap& m, int cls) {
  return static_cast<std::size_t>(std::count(m.labels.begin(), m.labels.end(), cls));
}

}  // namespace

// ---------------------------------------------------------------------------
// .mdt format

TEST(MdtFormat, GoldenHeaderForF32) {
  TempDir dir("mdt");
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  write_tensor(dir / "t.mdt", t);
  const auto raw = slurp(dir / "t.mdt");
  ASSERT_EQ(raw.size(), 17u + 24u);
  EXPECT_EQ(raw.substr(0, 17), "MDT1" + bytes({2, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 0}));
  // 1.0f little-endian is 00 00 80 3f.
  EXPECT_EQ(raw.substr(17, 4), bytes({0, 0, 0x80, 0x3f}));
}

TEST(MdtFormat, GoldenHeaderForLabels) {
  TempDir dir("mdt");
  LabelMap m(1, 2);
  m.labels = {3, 7};
  write_labels(dir / "m.mdt", m);
  EXPECT_EQ(slurp(dir / "m.mdt"), "MDT1" + bytes({2, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 1, 3, 7}));
}

TEST(MdtFormat, RoundTripIsBitwise) {
  TempDir dir("mdt");
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    Shape shape;
    for (std::size_t r = 0, rank = 1 + rng.below(4); r < rank; ++r) shape.push_back(1 + rng.below(5));
    auto t = random_tensor(shape, seed, -1e3f, 1e3f);
    t.mutable_data()[0] = -0.0f;
    if (t.numel() > 1) t.mutable_data()[1] = std::numeric_limits<float>::denorm_min();
    write_tensor(dir / "t.mdt", t);
    const auto back = read_tensor(dir / "t.mdt");
    EXPECT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i)
      EXPECT_EQ(std::bit_cast<std::uint32_t>(back.data()[i]), std::bit_cast<std::uint32_t>(t.data()[i]));
  }
  LabelMap m(3, 5);
  for (std::size_t i = 0; i < m.size(); ++i) m.labels[i] = static_cast<std::uint8_t>(i * 37);
  write_labels(dir / "m.mdt", m);
  EXPECT_EQ(read_labels(dir / "m.mdt"), m);
}

TEST(MdtFormat, Rank0AndEmptyTensors) {
  TempDir dir("mdt");
  write_tensor(dir / "s.mdt", Tensor({}, {2.5f}));
  EXPECT_EQ(read_tensor(dir / "s.mdt").to_vector(), std::vector<float>{2.5f});
  write_tensor(dir / "e.mdt", Tensor({0, 3}, {}));
  EXPECT_EQ(read_tensor(dir / "e.mdt").shape(), (Shape{0, 3}));
}

TEST(MdtFormat, BadMagic) { expect_format_error("XXXX" + bytes({0, 0, 0, 0, 0}), "not a tensor file"); }

TEST(MdtFormat, TruncatedPayload) {
  expect_format_error("MDT1" + bytes({1, 0, 0, 0, 4, 0, 0, 0, 0, 1, 2, 3}), "corrupt");
}

TEST(MdtFormat, TruncatedHeader) { expect_format_error("MDT1" + bytes({1, 0}), "corrupt"); }

TEST(MdtFormat, TrailingBytes) {
  expect_format_error("MDT1" + bytes({1, 0, 0, 0, 1, 0, 0, 0, 1, 9, 9}), "corrupt");
}

TEST(MdtFormat, RankAboveEight) {
  expect_format_error("MDT1" + bytes({9, 0, 0, 0}), "corrupt");
}

TEST(MdtFormat, UnknownDtype) {
  expect_format_error("MDT1" + bytes({1, 0, 0, 0, 1, 0, 0, 0, 7, 0}), "unsupported");
}

TEST(MdtFormat, ImplausibleDims) {
  expect_format_error("MDT1" + bytes({2, 0, 0, 0, 255, 255, 255, 255, 255, 255, 255, 255, 0}), "corrupt");
}

// ---------------------------------------------------------------------------
// Phantoms

TEST(Phantom, DeterministicInSeed) {
  PhantomConfig cfg;
  const auto a = generate_phantom(cfg, 11), b = generate_phantom(cfg, 11), c = generate_phantom(cfg, 12);
  EXPECT_EQ(a.mask, b.mask);
  EXPECT_EQ(a.image.to_vector(), b.image.to_vector());
  EXPECT_NE(a.mask, c.mask);
}

TEST(Phantom, ShapesRangesAndClasses) {
  for (std::size_t K : {2, 4, 9}) {
    PhantomConfig cfg;
    cfg.num_classes = K;
    cfg.size = 48;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto s = generate_phantom(cfg, seed);
      EXPECT_EQ(s.image.shape(), (Shape{1, 48, 48}));
      EXPECT_EQ(s.mask.height, 48u);
      for (auto v : s.mask.labels) EXPECT_LT(v, K);
      for (float v : s.image.data()) {
        EXPECT_GE(v, 0.0f);
        EXPECT_LE(v, 1.0f);
      }
    }
  }
}

TEST(Phantom, UndeformedAreasWithinEllipseBounds) {
  PhantomConfig cfg;
  cfg.deformation = 0.0f;
  cfg.noise_sigma = 0.0f;
  const double S = static_cast<double>(cfg.size);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = generate_phantom(cfg, seed);
    for (int k = 1; k < 4; ++k) {
      const auto [lo, hi] = cfg.radius_range(k - 1);
      const double lower = std::numbers::pi * std::pow(lo * S - 1.0, 2);
      const double upper = std::numbers::pi * std::pow(hi * S + 1.0, 2);
      const auto n = static_cast<double>(count_class(s.mask, k));
      EXPECT_GE(n, lower) << "seed " << seed << " organ " << k;
      EXPECT_LE(n, upper) << "seed " << seed << " organ " << k;
    }
  }
}

TEST(Phantom, NoiseFreeImageIsClassIntensity) {
  PhantomConfig cfg;
  cfg.noise_sigma = 0.0f;
  const auto s = generate_phantom(cfg, 3);
  for (std::size_t i = 0; i < s.mask.size(); ++i) EXPECT_FLOAT_EQ(s.image.data()[i], cfg.intensity(s.mask.labels[i]));
}

TEST(Phantom, HasASmallOrgan) {
  PhantomConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_phantom(cfg, seed);
    std::size_t smallest = s.mask.size();
    for (int k = 1; k < 4; ++k) smallest = std::min(smallest, count_class(s.mask, k));
    EXPECT_LE(static_cast<double>(smallest), 0.02 * static_cast<double>(s.mask.size())) << seed;
  }
}

TEST(Phantom, RejectsBadConfig) {
  PhantomConfig cfg;
  cfg.num_classes = 1;
  EXPECT_THROW(generate_phantom(cfg, 0), std::invalid_argument);
  cfg = PhantomConfig{};
  cfg.radius_ranges = {{0.1f, 0.5f}};
  EXPECT_THROW(generate_phantom(cfg, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Datasets

TEST(Dataset, WritesAndReadsInManifestOrder) {
  TempDir dir("ds");
  PhantomConfig cfg;
  cfg.size = 16;
  const auto samples = generate_phantoms(cfg, 10, 4);
  write_dataset(dir.path(), samples);
  const Dataset ds(dir.path());
  ASSERT_EQ(ds.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    const auto s = ds.get(i);
    EXPECT_EQ(s.id, samples[i].id);
    EXPECT_EQ(s.mask, samples[i].mask);
    EXPECT_EQ(s.image.to_vector(), samples[i].image.to_vector());
  }
  const auto first = slurp(dir / "manifest.jsonl");
  EXPECT_EQ(std::count(first.begin(), first.end(), '\n'), 10);
  EXPECT_EQ(first.substr(0, first.find('\n')),
            R"({"id":"phantom_00000","image":"phantom_00000.img.mdt","mask":"phantom_00000.msk.mdt"})");
}

TEST(Dataset, MissingFileNamesTheId) {
  TempDir dir("ds");
  PhantomConfig cfg;
  cfg.size = 16;
  write_dataset(dir.path(), generate_phantoms(cfg, 3, 5));
  std::filesystem::remove(dir / "phantom_00001.msk.mdt");
  try {
    Dataset ds(dir.path());
    FAIL() << "expected an error";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("phantom_00001"), std::string::npos) << e.what();
  }
}

TEST(Dataset, DuplicateIdFails) {
  TempDir dir("ds");
  PhantomConfig cfg;
  cfg.size = 16;
  write_dataset(dir.path(), generate_phantoms(cfg, 2, 6));
  const auto m = slurp(dir / "manifest.jsonl");
  spit(dir / "manifest.jsonl", m + m.substr(0, m.find('\n') + 1));
  EXPECT_THROW(Dataset{dir.path()}, FormatError);
}

TEST(Dataset, MaskImageShapeMismatchFails) {
  TempDir dir("ds");
  PhantomConfig cfg;
  cfg.size = 16;
  write_dataset(dir.path(), generate_phantoms(cfg, 1, 7));
  write_labels(dir / "phantom_00000.msk.mdt", LabelMap(8, 8));
  const Dataset ds(dir.path());
  EXPECT_THROW(ds.get(0), FormatError);
}

// ---------------------------------------------------------------------------
// Augmentation

TEST(Augment, NoFlagsIsIdentity) {
  const auto s = generate_phantom(PhantomConfig{}, 1);
  const auto a = augment(s, {});
  EXPECT_EQ(a.mask, s.mask);
  EXPECT_EQ(a.image.to_vector(), s.image.to_vector());
}

TEST(Augment, FlipsAreInvolutions) {
  const auto s = generate_phantom(PhantomConfig{}, 2);
  for (AugmentFlags f : {AugmentFlags{true, false, false}, AugmentFlags{false, true, false}}) {
    const auto twice = augment(augment(s, f), f);
    EXPECT_EQ(twice.mask, s.mask);
    EXPECT_EQ(twice.image.to_vector(), s.image.to_vector());
  }
  // Four quarter turns come back too.
  auto r = s;
  for (int i = 0; i < 4; ++i) r = augment(r, {false, false, true});
  EXPECT_EQ(r.mask, s.mask);
}

TEST(Augment, HflipMovesColumns) {
  Sample s{"x", Tensor({1, 2, 2}, {1, 2, 3, 4}), LabelMap(2, 2)};
  s.mask.labels = {1, 0, 0, 2};
  const auto a = augment(s, {true, false, false});
  EXPECT_EQ(a.image.to_vector(), (std::vector<float>{2, 1, 4, 3}));
  EXPECT_EQ(a.mask.labels, (std::vector<std::uint8_t>{0, 1, 2, 0}));
}

TEST(Augment, PreservesClassCountsAndPairing) {
  Rng rng(8);
  PhantomConfig cfg;
  cfg.noise_sigma = 0.0f;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = generate_phantom(cfg, trial);
    const auto f = random_flags(rng);
    const auto a = augment(s, f), b = augment(s, f);
    for (int k = 0; k < 4; ++k) {
      EXPECT_EQ(count_class(a.mask, k), count_class(s.mask, k));
      EXPECT_DOUBLE_EQ(dice_score(a.mask, b.mask, k), 1.0);
    }
    // Noise-free image still encodes the mask after the transform.
    for (std::size_t i = 0; i < a.mask.size(); ++i) EXPECT_FLOAT_EQ(a.image.data()[i], cfg.intensity(a.mask.labels[i]));
  }
}

TEST(MakeBatch, StacksImagesAndTargets) {
  PhantomConfig cfg;
  cfg.size = 8;
  const auto s = generate_phantoms(cfg, 3, 9);
  const auto [x, t] = make_batch(s);
  EXPECT_EQ(x.shape(), (Shape{3, 1, 8, 8}));
  EXPECT_EQ(t.shape(), (Shape{3, 8, 8}));
  EXPECT_EQ(t.data()[64 + 5], static_cast<float>(s[1].mask.labels[5]));
  EXPECT_EQ(x.data()[128 + 7], s[2].image.data()[7]);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST(Checkpoint, RoundTripRestoresEveryTensor) {
  TempDir dir("ckpt");
  ModelConfig c;
  c.num_classes = 3;
  c.channels = {4, 8, 8, 8};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.image_size = 16;
  c.norm_mode = NormMode::batch;
  const Model a(c, 1), b(c, 2);
  save_checkpoint(dir / "m.ckpt", a);
  load_checkpoint(dir / "m.ckpt", b);
  const auto ea = checkpoint_entries(a), eb = checkpoint_entries(b);
  ASSERT_EQ(ea.size(), eb.size());
  for (std::size_t i = 0; i < ea.size(); ++i) {
    EXPECT_EQ(ea[i].name, eb[i].name);
    EXPECT_EQ(ea[i].tensor.to_vector(), eb[i].tensor.to_vector()) << ea[i].name;
  }
  EXPECT_EQ(slurp(dir / "m.ckpt"), (save_checkpoint(dir / "n.ckpt", b), slurp(dir / "n.ckpt")));
}

TEST(Checkpoint, ShapeMismatchIsRejected) {
  TempDir dir("ckpt");
  ModelConfig c;
  c.num_classes = 3;
  c.channels = {4, 8, 8, 8};
  c.blocks_per_stage = {1, 1, 1, 1};
  c.image_size = 16;
  save_checkpoint(dir / "m.ckpt", Model(c, 1));
  c.num_classes = 4;
  EXPECT_THROW(load_checkpoint(dir / "m.ckpt", Model(c, 1)), FormatError);
}
