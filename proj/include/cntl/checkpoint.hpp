#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cntl/architectures.hpp"

// Checkpoint layout:
//   8 bytes   magic "CNTL0001"
//   8 bytes   header length N, little-endian uint64
//   N bytes   header text:
//               spec <canonical architecture spec | "archive">
//               seed <uint64>
//               epoch <int>
//               params <count>
//               <name> <b> <c> <h> <w>      one line per tensor
//   payload   little-endian float32 values, tensors in manifest order

namespace cntl {

inline constexpr char kCheckpointMagic[8] = {'C', 'N', 'T', 'L', '0', '0', '0', '1'};

struct NamedTensor {
  std::string name;
  Tensor<float> value;
};

struct CheckpointData {
  std::string spec_text;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::vector<NamedTensor> tensors;

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace detail {

inline void put_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw LoadError("truncated checkpoint header");
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

inline void put_f32(std::ostream& os, float f) {
  const auto u = std::bit_cast<std::uint32_t>(f);
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((u >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data) {
  std::ostringstream header;
  header << "spec " << data.spec_text << "\n";
  header << "seed " << data.seed << "\n";
  header << "epoch " << data.epoch << "\n";
  header << "params " << data.tensors.size() << "\n";
  for (const auto& t : data.tensors) {
    const Shape s = t.value.shape();
    header << t.name << " " << s.b << " " << s.c << " " << s.h << " " << s.w << "\n";
  }
  const std::string h = header.str();
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw LoadError("cannot write checkpoint " + path.string());
    os.write(kCheckpointMagic, 8);
    detail::put_u64(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& t : data.tensors)
      for (float v : t.value.vec()) detail::put_f32(os, v);
    if (!os) throw LoadError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline CheckpointData read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw LoadError("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw LoadError(path.string() + " is not a CNTL0001 checkpoint");
  const std::uint64_t hlen = detail::get_u64(is);
  if (hlen > (1u << 26)) throw LoadError("implausible checkpoint header length");
  std::string h(hlen, '\0');
  if (!is.read(h.data(), static_cast<std::streamsize>(hlen))) throw LoadError("truncated checkpoint header");
  std::istringstream hs(h);
  CheckpointData d;
  std::string key;
  std::size_t count = 0;
  if (!(hs >> key) || key != "spec") throw LoadError("checkpoint header missing spec");
  hs >> std::ws;
  std::getline(hs, d.spec_text);
  if (!(hs >> key >> d.seed) || key != "seed") throw LoadError("checkpoint header missing seed");
  if (!(hs >> key >> d.epoch) || key != "epoch") throw LoadError("checkpoint header missing epoch");
  if (!(hs >> key >> count) || key != "params") throw LoadError("checkpoint header missing manifest");
  for (std::size_t i = 0; i < count; ++i) {
    NamedTensor t;
    Shape s;
    if (!(hs >> t.name >> s.b >> s.c >> s.h >> s.w)) throw LoadError("malformed manifest entry " + std::to_string(i));
    t.value = Tensor<float>(s);
    d.tensors.push_back(std::move(t));
  }
  for (auto& t : d.tensors) {
    std::vector<unsigned char> buf(t.value.size() * 4);
    if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
      throw LoadError("truncated payload for " + t.name);
    for (std::size_t i = 0; i < t.value.size(); ++i) {
      std::uint32_t u = 0;
      for (int k = 3; k >= 0; --k) u = (u << 8) | buf[4 * i + k];
      t.value[i] = std::bit_cast<float>(u);
    }
  }
  return d;
}

template <typename T>
CheckpointData checkpoint_of(const Model<T>& model, int epoch) {
  CheckpointData d;
  d.spec_text = model.spec().canonical();
  d.seed = model.seed();
  d.epoch = epoch;
  for (const auto& p : model.parameters()) d.tensors.push_back({p.name, p.var->value.template cast<float>()});
  return d;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Model<T>& model, int epoch) {
  write_checkpoint(path, checkpoint_of(model, epoch));
}

// Rebuilds the model from the header spec and overwrites every parameter.
template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path, int* epoch = nullptr) {
  const CheckpointData d = read_checkpoint(path);
  ArchitectureSpec spec;
  try {
    spec = ArchitectureSpec::parse(d.spec_text);
  } catch (const ConfigError& e) {
    throw LoadError("checkpoint spec invalid: " + std::string(e.what()));
  }
  Model<T> model(spec, d.seed);
  const auto& params = model.parameters();
  if (params.size() != d.tensors.size())
    throw LoadError("checkpoint holds " + std::to_string(d.tensors.size()) + " tensors but spec '" + d.spec_text +
                    "' needs " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = d.tensors[i];
    if (t.name != params[i].name || !(t.value.shape() == params[i].var->value.shape()))
      throw LoadError("checkpoint tensor '" + t.name + "' " + t.value.shape().str() + " does not match spec layer '" +
                      params[i].name + "' " + params[i].var->value.shape().str());
    params[i].var->value = t.value.template cast<T>();
  }
  if (epoch) *epoch = d.epoch;
  return model;
}

// Backbone-only weight archive (same container, spec "archive").
template <typename T>
CheckpointData export_backbone_weights(const Model<T>& model) {
  CheckpointData d;
  d.spec_text = "archive";
  d.seed = model.seed();
  for (const auto& p : model.parameters())
    if (p.backbone) d.tensors.push_back({p.name, p.var->value.template cast<float>()});
  return d;
}

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;  // backbone layers absent from the archive
};

// Replaces backbone conv parameters present in `archive`; nothing else is
// touched. All shapes are checked before any parameter is written.
template <typename T>
LoadReport load_backbone_weights(Model<T>& model, const CheckpointData& archive) {
  LoadReport report;
  std::vector<std::pair<const ParamEntry<T>*, const NamedTensor*>> plan;
  for (const auto& p : model.parameters()) {
    if (!p.backbone) continue;
    const NamedTensor* t = archive.find(p.name);
    if (!t) {
      report.skipped.push_back(p.name);
      continue;
    }
    if (!(t->value.shape() == p.var->value.shape()))
      throw LoadError("layer '" + p.name + "': archive shape " + t->value.shape().str() + " does not match model shape " +
                      p.var->value.shape().str());
    plan.emplace_back(&p, t);
  }
  for (const auto& [p, t] : plan) {
    p->var->value = t->value.template cast<T>();
    report.loaded.push_back(p->name);
  }
  return report;
}

}  // namespace cntl
