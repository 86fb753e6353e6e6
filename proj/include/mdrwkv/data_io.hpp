#pragma once

// .mdt tensor container, label maps, synthetic organ phantoms, manifests and
// flip/rotate augmentation.
//
// .mdt layout (all integers little-endian):
//   "MDT1" | rank u32 | dims u32 x rank | dtype u8 (0 = f32, 1 = u8) | payload

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "mdrwkv/random.hpp"
#include "mdrwkv/tensor.hpp"

namespace mdrwkv {

namespace fs = std::filesystem;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DType : std::uint8_t { f32 = 0, u8 = 1 };

inline constexpr std::size_t kMaxRank = 8;

// Integer class ids per pixel, row-major.
struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), labels(h * w, fill) {}

  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::size_t size() const { return labels.size(); }
  bool operator==(const LabelMap&) const = default;
};

// Raw decoded record; exactly one of f32/u8 is populated.
struct MdtRecord {
  Shape shape;
  DType dtype = DType::f32;
  std::vector<float> f32;
  std::vector<std::uint8_t> u8;
};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline bool get_u32(std::istream& is, std::uint32_t& v) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
  v = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  return true;
}

inline void write_header(std::ostream& os, const Shape& shape, DType dtype) {
  if (shape.size() > kMaxRank) throw FormatError("mdt: rank " + std::to_string(shape.size()) + " exceeds 8");
  os.write("MDT1", 4);
  put_u32(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put_u32(os, static_cast<std::uint32_t>(d));
  os.put(static_cast<char>(dtype));
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  return os;
}

inline std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return is;
}

}  // namespace detail

inline void write_mdt(std::ostream& os, const Tensor& t) {
  detail::write_header(os, t.shape(), DType::f32);
  for (float v : t.data()) detail::put_u32(os, std::bit_cast<std::uint32_t>(v));
}

inline void write_mdt(std::ostream& os, const LabelMap& m) {
  detail::write_header(os, {m.height, m.width}, DType::u8);
  os.write(reinterpret_cast<const char*>(m.labels.data()), static_cast<std::streamsize>(m.labels.size()));
}

inline MdtRecord read_mdt(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::string(magic, 4) != "MDT1") throw FormatError("not a tensor file");
  std::uint32_t rank = 0;
  if (!detail::get_u32(is, rank)) throw FormatError("corrupt tensor file: truncated header");
  if (rank > kMaxRank) throw FormatError("corrupt tensor file: rank " + std::to_string(rank));
  MdtRecord r;
  for (std::uint32_t i = 0; i < rank; ++i) {
    std::uint32_t d = 0;
    if (!detail::get_u32(is, d)) throw FormatError("corrupt tensor file: truncated header");
    r.shape.push_back(d);
  }
  const int code = is.get();
  if (code == std::char_traits<char>::eof()) throw FormatError("corrupt tensor file: truncated header");
  std::size_t n = 1;
  for (auto d : r.shape) {
    if (d != 0 && n > (std::size_t{1} << 40) / d) throw FormatError("corrupt tensor file: implausible dims");
    n *= d;
  }
  if (code == 0) {
    r.dtype = DType::f32;
    r.f32.resize(n);
    for (auto& v : r.f32) {
      std::uint32_t bits = 0;
      if (!detail::get_u32(is, bits)) throw FormatError("corrupt tensor file: truncated payload");
      v = std::bit_cast<float>(bits);
    }
  } else if (code == 1) {
    r.dtype = DType::u8;
    r.u8.resize(n);
    if (n > 0 && !is.read(reinterpret_cast<char*>(r.u8.data()), static_cast<std::streamsize>(n))) {
      throw FormatError("corrupt tensor file: truncated payload");
    }
  } else {
    throw FormatError("unsupported dtype code " + std::to_string(code));
  }
  return r;
}

inline void write_tensor(const fs::path& path, const Tensor& t) {
  auto os = detail::open_out(path);
  write_mdt(os, t);
}

inline void write_labels(const fs::path& path, const LabelMap& m) {
  auto os = detail::open_out(path);
  write_mdt(os, m);
}

inline MdtRecord read_record(const fs::path& path) {
  auto is = detail::open_in(path);
  auto r = read_mdt(is);
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("corrupt tensor file: trailing bytes in " + path.string());
  return r;
}

// u8 payloads are widened to f32.
inline Tensor read_tensor(const fs::path& path) {
  auto r = read_record(path);
  if (r.dtype == DType::u8) return Tensor(r.shape, std::vector<float>(r.u8.begin(), r.u8.end()));
  return Tensor(r.shape, std::move(r.f32));
}

inline LabelMap read_labels(const fs::path& path) {
  auto r = read_record(path);
  if (r.dtype != DType::u8 || r.shape.size() != 2) {
    throw FormatError(path.string() + ": expected a rank-2 u8 label map, got " + shape_str(r.shape));
  }
  LabelMap m;
  m.height = r.shape[0];
  m.width = r.shape[1];
  m.labels = std::move(r.u8);
  return m;
}

// ---------------------------------------------------------------------------
// Samples and phantoms

struct Sample {
  std::string id;
  Tensor image;  // [1, S, S], values in [0, 1]
  LabelMap mask;  // [S, S]
};

struct PhantomConfig {
  std::size_t size = 64;
  std::size_t num_classes = 4;
  // Radius range as a fraction of the image side, cycled over organs.
  std::vector<std::pair<float, float>> radius_ranges{{0.22f, 0.30f}, {0.12f, 0.18f}, {0.05f, 0.07f}};
  float noise_sigma = 0.05f;
  // Relative amplitude of the sinusoidal boundary perturbation.
  float deformation = 0.15f;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("PhantomConfig: num_classes must be >= 2");
    if (num_classes > 256) throw std::invalid_argument("PhantomConfig: num_classes must be <= 256");
    if (size < 8) throw std::invalid_argument("PhantomConfig: size must be >= 8");
    if (radius_ranges.empty()) throw std::invalid_argument("PhantomConfig: no radius ranges");
    for (auto [lo, hi] : radius_ranges) {
      if (!(lo > 0.0f && lo <= hi && hi < 0.5f)) {
        throw std::invalid_argument("PhantomConfig: radius ranges must lie in (0, 0.5)");
      }
    }
    if (deformation < 0.0f || deformation >= 1.0f) throw std::invalid_argument("PhantomConfig: deformation must be in [0, 1)");
    if (noise_sigma < 0.0f) throw std::invalid_argument("PhantomConfig: noise_sigma must be >= 0");
  }

  std::pair<float, float> radius_range(std::size_t organ) const { return radius_ranges[organ % radius_ranges.size()]; }

  // Evenly spaced over [0.1, 0.9], background darkest.
  float intensity(std::size_t cls) const {
    return 0.1f + 0.8f * static_cast<float>(cls) / static_cast<float>(num_classes - 1);
  }
};

struct Organ {
  double cy, cx, ry, rx, angle;
  int lobes;
  double phase;
};

namespace detail {

inline bool inside(const Organ& o, double amplitude, double y, double x) {
  const double dy = y - o.cy, dx = x - o.cx;
  const double c = std::cos(o.angle), s = std::sin(o.angle);
  const double u = (c * dx + s * dy) / o.rx;
  const double v = (-s * dx + c * dy) / o.ry;
  const double rho = std::sqrt(u * u + v * v);
  const double limit = 1.0 + amplitude * std::sin(o.lobes * std::atan2(v, u) + o.phase);
  return rho <= limit;
}

}  // namespace detail

// Organs 1..K-1 are deformed ellipses placed without overlap where the
// rejection sampler allows; if it gives up, later organs overwrite earlier.
inline Sample generate_phantom(const PhantomConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const double S = static_cast<double>(cfg.size);
  std::vector<Organ> organs;
  for (std::size_t k = 1; k < cfg.num_classes; ++k) {
    const auto [lo, hi] = cfg.radius_range(k - 1);
    Organ o{};
    o.ry = rng.uniform(lo, hi) * S;
    o.rx = rng.uniform(lo, hi) * S;
    o.angle = rng.uniform() * std::numbers::pi;
    o.lobes = 2 + static_cast<int>(rng.below(3));
    o.phase = rng.uniform() * 2.0 * std::numbers::pi;
    const double reach = std::max(o.ry, o.rx) * (1.0 + cfg.deformation);
    const double span = std::max(S - 2.0 * reach - 1.0, 0.0);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      o.cy = reach + rng.uniform() * span;
      o.cx = reach + rng.uniform() * span;
      bool clear = true;
      for (const auto& p : organs) {
        const double pr = std::max(p.ry, p.rx) * (1.0 + cfg.deformation);
        if (std::hypot(o.cy - p.cy, o.cx - p.cx) < reach + pr + 1.0) clear = false;
      }
      if (clear) break;
    }
    organs.push_back(o);
  }

  LabelMap mask(cfg.size, cfg.size);
  for (std::size_t k = 0; k < organs.size(); ++k)
    for (std::size_t y = 0; y < cfg.size; ++y)
      for (std::size_t x = 0; x < cfg.size; ++x)
        if (detail::inside(organs[k], cfg.deformation, static_cast<double>(y), static_cast<double>(x)))
          mask.at(y, x) = static_cast<std::uint8_t>(k + 1);

  std::vector<float> img(mask.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double v = cfg.intensity(mask.labels[i]) + cfg.noise_sigma * rng.normal();
    img[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
  }
  char id[32];
  std::snprintf(id, sizeof id, "phantom_%05llu", static_cast<unsigned long long>(seed % 100000));
  return {id, Tensor({1, cfg.size, cfg.size}, std::move(img)), std::move(mask)};
}

// Sample i of a generated set uses seed splitmix64(seed + i) and id phantom_<i>.
inline std::vector<Sample> generate_phantoms(const PhantomConfig& cfg, std::size_t count, std::uint64_t seed) {
  std::vector<Sample> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto s = generate_phantom(cfg, splitmix64(seed + i));
    char id[32];
    std::snprintf(id, sizeof id, "phantom_%05zu", i);
    s.id = id;
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets on disk

struct ManifestEntry {
  std::string id, image, mask;
};

inline void write_sample(const fs::path& dir, const Sample& s) {
  write_tensor(dir / (s.id + ".img.mdt"), s.image);
  write_labels(dir / (s.id + ".msk.mdt"), s.mask);
}

// Writes <id>.img.mdt / <id>.msk.mdt for every sample and manifest.jsonl.
inline void write_dataset(const fs::path& dir, const std::vector<Sample>& samples) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.jsonl").string());
  for (const auto& s : samples) {
    write_sample(dir, s);
    nlohmann::ordered_json line{{"id", s.id}, {"image", s.id + ".img.mdt"}, {"mask", s.id + ".msk.mdt"}};
    manifest << line.dump() << '\n';
  }
}

inline std::vector<ManifestEntry> read_manifest(const fs::path& dir) {
  auto is = detail::open_in(dir / "manifest.jsonl");
  std::vector<ManifestEntry> entries;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      entries.push_back({j.at("id").get<std::string>(), j.at("image").get<std::string>(),
                         j.at("mask").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("manifest.jsonl line " + std::to_string(lineno) + ": " + e.what());
    }
    if (!seen.insert(entries.back().id).second) throw FormatError("duplicate sample id " + entries.back().id);
  }
  return entries;
}

// Lazily loaded, in manifest order.
class Dataset {
 public:
  Dataset() = default;

  explicit Dataset(const fs::path& dir) : dir_(dir), entries_(read_manifest(dir)) {
    for (const auto& e : entries_) {
      for (const auto& f : {e.image, e.mask}) {
        if (!fs::exists(dir_ / f)) throw std::runtime_error("sample " + e.id + ": missing file " + f);
      }
    }
  }

  std::size_t size() const { return entries_.size(); }
  const ManifestEntry& entry(std::size_t i) const { return entries_.at(i); }

  Sample get(std::size_t i) const {
    const auto& e = entries_.at(i);
    Sample s{e.id, read_tensor(dir_ / e.image), read_labels(dir_ / e.mask)};
    if (s.image.rank() != 3 || s.image.dim(1) != s.mask.height || s.image.dim(2) != s.mask.width) {
      throw FormatError("sample " + e.id + ": image " + shape_str(s.image.shape()) +
                        " does not match mask " + std::to_string(s.mask.height) + "x" +
                        std::to_string(s.mask.width));
    }
    return s;
  }

 private:
  fs::path dir_;
  std::vector<ManifestEntry> entries_;
};

inline Dataset load_dataset(const fs::path& dir) { return Dataset(dir); }

class InMemoryDataset {
 public:
  InMemoryDataset() = default;
  explicit InMemoryDataset(std::vector<Sample> samples) : samples_(std::move(samples)) {}

  std::size_t size() const { return samples_.size(); }
  const Sample& get(std::size_t i) const { return samples_.at(i); }

 private:
  std::vector<Sample> samples_;
};

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentFlags {
  bool hflip = false, vflip = false, rot90 = false;
};

inline AugmentFlags random_flags(Rng& rng) {
  AugmentFlags f;
  f.hflip = rng.bernoulli(0.5);
  f.vflip = rng.bernoulli(0.5);
  f.rot90 = rng.bernoulli(0.5);
  return f;
}

namespace detail {

// Source index for destination (y, x) after hflip, vflip then a
// counter-clockwise quarter turn (square images only).
inline std::size_t augment_source(const AugmentFlags& f, std::size_t n, std::size_t y, std::size_t x) {
  if (f.rot90) {
    const std::size_t ty = x, tx = n - 1 - y;
    y = ty;
    x = tx;
  }
  if (f.vflip) y = n - 1 - y;
  if (f.hflip) x = n - 1 - x;
  return y * n + x;
}

}  // namespace detail

// Same geometric transform on image and mask; labels are moved, never mixed.
inline Sample augment(const Sample& s, const AugmentFlags& f) {
  if (!f.hflip && !f.vflip && !f.rot90) return s;
  const std::size_t n = s.mask.height;
  if (s.mask.width != n) throw ShapeError("augment: square images only");
  const std::size_t C = s.image.dim(0);
  std::vector<float> img(s.image.numel());
  LabelMap mask(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const std::size_t src = detail::augment_source(f, n, y, x);
      mask.labels[y * n + x] = s.mask.labels[src];
      for (std::size_t c = 0; c < C; ++c) img[c * n * n + y * n + x] = s.image.data()[c * n * n + src];
    }
  return {s.id, Tensor(s.image.shape(), std::move(img)), std::move(mask)};
}

// Stacks samples into images [B, C, S, S] and float class ids [B, S, S].
inline std::pair<Tensor, Tensor> make_batch(const std::vector<Sample>& samples) {
  if (samples.empty()) throw std::invalid_argument("make_batch: no samples");
  const Shape& is = samples[0].image.shape();
  std::vector<float> img, tgt;
  for (const auto& s : samples) {
    if (s.image.shape() != is) throw ShapeError("make_batch: mixed image shapes");
    img.insert(img.end(), s.image.data().begin(), s.image.data().end());
    tgt.insert(tgt.end(), s.mask.labels.begin(), s.mask.labels.end());
  }
  const std::size_t B = samples.size();
  return {Tensor({B, is[0], is[1], is[2]}, std::move(img)),
          Tensor({B, samples[0].mask.height, samples[0].mask.width}, std::move(tgt))};
}

}  // namespace mdrwkv
