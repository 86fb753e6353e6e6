#pragma once

// Model checkpoints: u32 entry count, then per entry a u32 name length, the
// name bytes and one .mdt record. Parameters come first, then buffers, in
// Model::collect() order.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mdrwkv/data_io.hpp"
#include "mdrwkv/network.hpp"

namespace mdrwkv {

inline std::vector<NamedTensor> checkpoint_entries(const Model& model) {
  auto c = model.collect();
  auto entries = std::move(c.params);
  entries.insert(entries.end(), c.buffers.begin(), c.buffers.end());
  return entries;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& model) {
  const auto entries = checkpoint_entries(model);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  detail::put_u32(os, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    detail::put_u32(os, static_cast<std::uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_mdt(os, e.tensor);
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline std::map<std::string, MdtRecord> read_checkpoint(const std::filesystem::path& path) {
  auto is = detail::open_in(path);
  std::uint32_t count = 0;
  if (!detail::get_u32(is, count)) throw FormatError("corrupt checkpoint: " + path.string());
  std::map<std::string, MdtRecord> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t len = 0;
    if (!detail::get_u32(is, len) || len > 4096) throw FormatError("corrupt checkpoint: " + path.string());
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("corrupt checkpoint: " + path.string());
    out[name] = read_mdt(is);
  }
  return out;
}

// Copies every stored tensor into the matching model tensor; names and shapes
// must agree exactly.
inline void load_checkpoint(const std::filesystem::path& path, const Model& model) {
  auto stored = read_checkpoint(path);
  const auto entries = checkpoint_entries(model);
  if (stored.size() != entries.size()) {
    throw FormatError("checkpoint has " + std::to_string(stored.size()) + " entries, model expects " +
                      std::to_string(entries.size()));
  }
  for (const auto& e : entries) {
    auto it = stored.find(e.name);
    if (it == stored.end()) throw FormatError("checkpoint is missing " + e.name);
    if (it->second.dtype != DType::f32 || it->second.shape != e.tensor.shape()) {
      throw FormatError("checkpoint entry " + e.name + " has shape " + shape_str(it->second.shape) +
                        ", model expects " + shape_str(e.tensor.shape()));
    }
    auto dst = Tensor(e.tensor).mutable_data();
    std::copy(it->second.f32.begin(), it->second.f32.end(), dst.begin());
  }
}

}  // namespace mdrwkv
