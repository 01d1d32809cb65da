#pragma once

// Checkpoint file layout (version 1):
//
//   KVLATENT-CHECKPOINT\n
//   version 1\n
//   <key> <value>\n            one line per ModelConfig / adapter field
//   tensors <count>\n
//   tensor <name> <rank> <extent>... <offset> <nbytes> <crc32-hex>\n
//   end\n
//   <payload>
//
// Offsets are relative to the first payload byte. Each tensor is stored as
// little-endian IEEE-754 binary32, row-major; the CRC-32 (zlib polynomial)
// covers exactly those bytes.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "kvlatent/error.hpp"
#include "kvlatent/model.hpp"

namespace kvlatent {

inline constexpr const char* kCheckpointMagic = "KVLATENT-CHECKPOINT";
inline constexpr int kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

struct TensorEntry {
  std::string name;
  Shape shape;
  std::uint64_t offset = 0;
  std::uint64_t nbytes = 0;
  std::uint32_t crc = 0;
};

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::uint32_t crc32_of(const std::string& bytes) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size())));
}

template <class T>
std::string to_f32_bytes(const Tensor<T>& t) {
  std::string out(t.size() * 4, '\0');
  for (std::size_t i = 0; i < t.size(); ++i) {
    const float f = static_cast<float>(t[i]);
    std::memcpy(out.data() + 4 * i, &f, 4);
  }
  return out;
}

inline std::vector<std::pair<std::string, std::string>> header_fields(
    const ModelConfig& c, const std::optional<LoraSpec>& lora, bool base_frozen) {
  return {
      {"vocab", std::to_string(c.vocab)},
      {"d_model", std::to_string(c.d_model)},
      {"n_layers", std::to_string(c.n_layers)},
      {"n_heads", std::to_string(c.geom.n_heads)},
      {"n_kv_heads", std::to_string(c.geom.n_kv_heads)},
      {"d_qk", std::to_string(c.geom.d_qk)},
      {"d_vo", std::to_string(c.geom.d_vo)},
      {"d_ffn", std::to_string(c.d_ffn)},
      {"max_seq", std::to_string(c.max_seq)},
      {"rope_theta", format_real(c.rope.theta)},
      {"rope_mode", to_string(c.rope.mode)},
      {"rope_layout", to_string(c.rope.layout)},
      {"rope_parent_dim", std::to_string(c.rope.parent_dim)},
      {"rope_stride", std::to_string(c.rope.stride)},
      {"rope_phase", std::to_string(c.rope.phase)},
      {"lora_rank", std::to_string(lora ? lora->rank : 0)},
      {"lora_alpha", format_real(lora ? lora->alpha : 0.0)},
      {"base_frozen", base_frozen ? "1" : "0"},
  };
}

}  // namespace detail

template <class T>
void save_checkpoint(const Model<T>& model, std::ostream& os) {
  std::vector<TensorEntry> dir;
  std::string payload;
  for_each_param(model.weights(), [&](const std::string& name, const Tensor<T>& t, ParamKind) {
    std::string bytes = detail::to_f32_bytes(t);
    dir.push_back({name, t.shape(), payload.size(), bytes.size(), detail::crc32_of(bytes)});
    payload += bytes;
  });
  std::ostringstream hdr;
  hdr << kCheckpointMagic << '\n' << "version " << kCheckpointVersion << '\n';
  for (const auto& [k, v] : detail::header_fields(model.config(), model.lora(), model.base_frozen()))
    hdr << k << ' ' << v << '\n';
  hdr << "tensors " << dir.size() << '\n';
  for (const auto& e : dir) {
    hdr << "tensor " << e.name << ' ' << e.shape.size();
    for (auto x : e.shape) hdr << ' ' << x;
    char crc[16];
    std::snprintf(crc, sizeof crc, "%08x", e.crc);
    hdr << ' ' << e.offset << ' ' << e.nbytes << ' ' << crc << '\n';
  }
  hdr << "end\n";
  const std::string h = hdr.str();
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw FormatError("checkpoint: write failed");
}

template <class T>
void save_checkpoint(const Model<T>& model, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("checkpoint: cannot open '" + path + "' for writing");
  save_checkpoint(model, os);
}

template <class T>
Model<T> load_checkpoint(std::istream& is) {
  std::string line;
  auto next_line = [&](const char* what) {
    if (!std::getline(is, line)) throw FormatError(std::string("checkpoint: truncated header (") + what + ")");
    return line;
  };
  if (next_line("magic") != kCheckpointMagic) throw FormatError("checkpoint: bad magic");
  {
    std::istringstream ls(next_line("version"));
    std::string key;
    int version = -1;
    ls >> key >> version;
    if (key != "version") throw FormatError("checkpoint: missing version line");
    if (version != kCheckpointVersion)
      throw FormatError("checkpoint: version mismatch (file " + std::to_string(version) +
                        ", supported " + std::to_string(kCheckpointVersion) + ")");
  }
  std::map<std::string, std::string> kv;
  std::size_t n_tensors = 0;
  for (;;) {
    std::istringstream ls(next_line("fields"));
    std::string key, value;
    ls >> key >> value;
    if (key == "tensors") {
      n_tensors = std::stoul(value);
      break;
    }
    if (key.empty()) throw FormatError("checkpoint: blank header line");
    kv[key] = value;
  }
  auto get = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw FormatError("checkpoint: header lacks '" + k + "'");
    return it->second;
  };
  auto num = [&](const std::string& k) -> std::size_t {
    try {
      return std::stoul(get(k));
    } catch (const std::logic_error&) {
      throw FormatError("checkpoint: header field '" + k + "' is not a number");
    }
  };

  ModelConfig c;
  std::optional<LoraSpec> lora;
  bool frozen = false;
  try {
    c.vocab = num("vocab");
    c.d_model = num("d_model");
    c.n_layers = num("n_layers");
    c.geom = {c.d_model, num("n_heads"), num("n_kv_heads"), num("d_qk"), num("d_vo")};
    c.d_ffn = num("d_ffn");
    c.max_seq = num("max_seq");
    c.rope.theta = std::stod(get("rope_theta"));
    c.rope.dim = c.geom.d_qk;
    c.rope.mode = parse_rope_mode(get("rope_mode"));
    c.rope.layout = parse_rope_layout(get("rope_layout"));
    c.rope.parent_dim = num("rope_parent_dim");
    c.rope.stride = num("rope_stride");
    c.rope.phase = num("rope_phase");
    if (const std::size_t r = num("lora_rank"); r > 0)
      lora = LoraSpec{r, std::stod(get("lora_alpha"))};
    frozen = num("base_frozen") != 0;
    c.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: invalid configuration: ") + e.what());
  }

  std::vector<TensorEntry> dir;
  for (std::size_t i = 0; i < n_tensors; ++i) {
    std::istringstream ls(next_line("directory"));
    std::string tag;
    TensorEntry e;
    std::size_t rank = 0;
    ls >> tag >> e.name >> rank;
    if (tag != "tensor" || e.name.empty() || rank == 0 || rank > 2)
      throw FormatError("checkpoint: corrupted directory entry " + std::to_string(i) +
                        (e.name.empty() ? std::string() : " (tensor '" + e.name + "')"));
    e.shape.resize(rank);
    for (auto& x : e.shape) ls >> x;
    std::string crc;
    ls >> e.offset >> e.nbytes >> crc;
    if (!ls || e.nbytes != shape_numel(e.shape) * 4)
      throw FormatError("checkpoint: corrupted directory entry for tensor '" + e.name + "'");
    e.crc = static_cast<std::uint32_t>(std::stoul(crc, nullptr, 16));
    dir.push_back(std::move(e));
  }
  if (next_line("end") != "end") throw FormatError("checkpoint: missing end marker");

  std::string payload((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  std::map<std::string, const TensorEntry*> by_name;
  std::uint64_t expected_offset = 0;
  for (const auto& e : dir) {
    if (e.offset != expected_offset)
      throw FormatError("checkpoint: tensor '" + e.name + "' has overlapping or gapped offset " +
                        std::to_string(e.offset));
    expected_offset += e.nbytes;
    if (e.offset + e.nbytes > payload.size())
      throw FormatError("checkpoint: truncated payload at tensor '" + e.name + "'");
    if (!by_name.emplace(e.name, &e).second)
      throw FormatError("checkpoint: duplicate tensor '" + e.name + "'");
  }
  if (expected_offset != payload.size())
    throw FormatError("checkpoint: " + std::to_string(payload.size() - expected_offset) +
                      " trailing payload bytes");

  // Skeleton with the right structure; every slot is then filled from the file.
  typename Model<T>::Weights w;
  w.blocks.resize(c.n_layers);
  if (lora)
    for (auto& b : w.blocks) b.lora_gate = b.lora_up = b.lora_down = LoraT<Tensor<T>>{};
  std::size_t used = 0;
  for_each_param(w, [&](const std::string& name, Tensor<T>& t, ParamKind) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    const TensorEntry& e = *it->second;
    const std::string bytes = payload.substr(e.offset, e.nbytes);
    if (detail::crc32_of(bytes) != e.crc)
      throw FormatError("checkpoint: checksum mismatch for tensor '" + name + "'");
    t = Tensor<T>(e.shape);
    for (std::size_t i = 0; i < t.size(); ++i) {
      float f;
      std::memcpy(&f, bytes.data() + 4 * i, 4);
      t[i] = static_cast<T>(f);
    }
    ++used;
  });
  if (used != dir.size()) throw FormatError("checkpoint: directory lists unexpected tensors");
  try {
    return Model<T>(c, std::move(w), lora, frozen);
  } catch (const ShapeError& e) {
    throw FormatError(std::string("checkpoint: corrupted directory entry: ") + e.what());
  }
}

template <class T>
Model<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open '" + path + "'");
  return load_checkpoint<T>(is);
}

}  // namespace kvlatent
