// BCKP checkpoints: "BCKP", u32 entry count, entries of (u16 name length,
// UTF-8 name, BCT1 tensor), then the config as a u32-length-prefixed text
// block of `key = value` lines.
#pragma once

#include "bcosvit/model.hpp"

#include <filesystem>
#include <fstream>

namespace bcosvit {

struct Checkpoint {
  std::vector<std::pair<std::string, Tensor<float>>> entries;
  KeyValues config;

  const Tensor<float>* find(const std::string& name) const {
    for (auto& [k, t] : entries)
      if (k == name) return &t;
    return nullptr;
  }
};

inline void write_checkpoint(std::ostream& os, const Checkpoint& ck) {
  os.write("BCKP", 4);
  if (ck.entries.size() > 0xFFFFFFFFu) throw FormatError("too many checkpoint entries");
  detail::put_le<std::uint32_t>(os, std::uint32_t(ck.entries.size()));
  for (auto& [name, t] : ck.entries) {
    if (name.size() > 0xFFFF) throw FormatError("checkpoint entry name too long");
    detail::put_le<std::uint16_t>(os, std::uint16_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    write_bct1(os, t);
  }
  const std::string text = ck.config.to_text();
  detail::put_le<std::uint32_t>(os, std::uint32_t(text.size()));
  os.write(text.data(), std::streamsize(text.size()));
  if (!os) throw FormatError("checkpoint write failed");
}

inline Checkpoint read_checkpoint(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "BCKP", 4) != 0) throw FormatError("bad checkpoint magic");
  Checkpoint ck;
  const auto count = detail::get_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = detail::get_le<std::uint16_t>(is);
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated checkpoint entry name");
    ck.entries.emplace_back(std::move(name), read_bct1<float>(is));
  }
  const auto len = detail::get_le<std::uint32_t>(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw FormatError("truncated checkpoint config block");
  ck.config = KeyValues::parse(text);
  return ck;
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open '" + tmp.string() + "' for writing");
    write_checkpoint(os, ck);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint '" + path.string() + "'");
  return read_checkpoint(is);
}

inline Checkpoint model_checkpoint(const BcosViT<float>& m) {
  Checkpoint ck;
  for (auto& [name, t] : m.params()) ck.entries.emplace_back(name, t);
  ck.config = m.config().to_kv();
  return ck;
}

/// Rebuilds the model from a checkpoint; entries outside the model layout
/// (optimiser state) are ignored.
inline BcosViT<float> model_from_checkpoint(const Checkpoint& ck) {
  KeyValues model_kv;
  for (auto& [k, v] : ck.config.entries())
    if (k.rfind("model.", 0) == 0) model_kv.set(k, v);
  auto cfg = BcosViTConfig::from_kv(model_kv);
  model_kv.require_all_used();
  BcosViT<float> probe(cfg, 0);
  ParameterSet<float> params;
  for (auto& [name, dims] : probe.layout()) {
    const Tensor<float>* t = ck.find(name);
    if (!t) throw FormatError("checkpoint lacks parameter '" + name + "'");
    params.add(name, *t);
  }
  return BcosViT<float>(cfg, std::move(params));
}

}  // namespace bcosvit
