#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "moedst/model.hpp"

namespace moedst {

// Single self-describing binary container for backbone and adapter
// parameters. Layout (all integers little-endian):
//   magic            8 bytes  "MDSTCKPT"
//   format_version   u32
//   role             u32      0 = backbone, 1 = adapter
//   config           8 x i32  vocab_size, d_model, n_heads, n_enc_layers,
//                             n_dec_layers, d_ff, adapter_bottleneck_dim,
//                             max_seq_len
//   n_tensors        u32
//   per tensor:      name_len u32, name bytes, rank u32, dims i32 x rank,
//                    values f64 x numel (row-major)
inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'D', 'S', 'T', 'C', 'K', 'P', 'T'};

enum class CheckpointRole : uint32_t { backbone = 0, adapter = 1 };

namespace detail {

template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
  return v;
}

inline void write_config(std::ostream& os, const ModelConfig& c) {
  for (int v : {c.vocab_size, c.d_model, c.n_heads, c.n_enc_layers, c.n_dec_layers, c.d_ff,
                c.adapter_bottleneck_dim, c.max_seq_len})
    write_pod<int32_t>(os, v);
}

inline ModelConfig read_config(std::istream& is, const std::string& path) {
  ModelConfig c;
  int32_t* fields[] = {&c.vocab_size,   &c.d_model, &c.n_heads,
                       &c.n_enc_layers, &c.n_dec_layers, &c.d_ff,
                       &c.adapter_bottleneck_dim, &c.max_seq_len};
  for (int32_t* f : fields) *f = read_pod<int32_t>(is, path);
  return c;
}

inline void write_params(std::ostream& os, const ParamMap& params) {
  write_pod<uint32_t>(os, static_cast<uint32_t>(params.size()));
  for (const auto& [name, t] : params) {
    write_pod<uint32_t>(os, static_cast<uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint32_t>(os, static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod<int32_t>(os, d);
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
}

inline ParamMap read_params(std::istream& is, const std::string& path) {
  ParamMap params;
  uint32_t n = read_pod<uint32_t>(is, path);
  for (uint32_t i = 0; i < n; ++i) {
    uint32_t name_len = read_pod<uint32_t>(is, path);
    if (name_len > 4096) throw std::runtime_error("checkpoint: corrupt tensor name in " + path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t rank = read_pod<uint32_t>(is, path);
    if (rank > 8) throw std::runtime_error("checkpoint: corrupt tensor rank in " + path);
    std::vector<int> shape(rank);
    for (uint32_t r = 0; r < rank; ++r) {
      shape[r] = read_pod<int32_t>(is, path);
      if (shape[r] <= 0) throw std::runtime_error("checkpoint: corrupt tensor shape in " + path);
    }
    Tensor t(shape);
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated file " + path);
    params.emplace(std::move(name), std::move(t));
  }
  return params;
}

inline void open_and_check_header(std::ifstream& f, const std::string& path,
                                  CheckpointRole expected_role) {
  if (!f) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw std::runtime_error("checkpoint: bad magic in " + path);
  uint32_t version = read_pod<uint32_t>(f, path);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint: format version " + std::to_string(version) + " in " +
                             path + ", this build reads version " +
                             std::to_string(kCheckpointVersion));
  auto role = static_cast<CheckpointRole>(read_pod<uint32_t>(f, path));
  if (role != expected_role)
    throw std::runtime_error("checkpoint: role mismatch in " + path);
}

}  // namespace detail

inline void save_checkpoint(const BackboneParams& bb, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(kCheckpointMagic, 8);
  detail::write_pod<uint32_t>(f, kCheckpointVersion);
  detail::write_pod<uint32_t>(f, static_cast<uint32_t>(CheckpointRole::backbone));
  detail::write_config(f, bb.config);
  detail::write_params(f, bb.tensors);
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline void save_checkpoint(const AdapterParams& ad, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("checkpoint: cannot write " + path);
  f.write(kCheckpointMagic, 8);
  detail::write_pod<uint32_t>(f, kCheckpointVersion);
  detail::write_pod<uint32_t>(f, static_cast<uint32_t>(CheckpointRole::adapter));
  detail::write_config(f, ad.config);
  detail::write_params(f, ad.tensors);
  if (!f) throw std::runtime_error("checkpoint: write failed for " + path);
}

inline BackboneParams load_backbone_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  detail::open_and_check_header(f, path, CheckpointRole::backbone);
  BackboneParams bb;
  bb.config = detail::read_config(f, path);
  bb.config.validate();
  bb.tensors = detail::read_params(f, path);
  return bb;
}

inline AdapterParams load_adapter_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  detail::open_and_check_header(f, path, CheckpointRole::adapter);
  AdapterParams ad;
  ad.config = detail::read_config(f, path);
  ad.config.validate();
  ad.tensors = detail::read_params(f, path);
  return ad;
}

}  // namespace moedst
