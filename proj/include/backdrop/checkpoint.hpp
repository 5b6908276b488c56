/*
 * Copyright 2026 the backdrop authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Bit-exact checkpoint files.
//
// Layout: magic bytes "DPMT", a 4-byte little-endian format version, then
// a table of tensor entries until end of file. Each entry is
//   u32 name length | name bytes | u32 rank | u32 extents[rank] |
//   f32 payload (little-endian, product(extents) values)
// Model parameters use their parameter names; optimizer moments are
// stored as opt.m.<name> / opt.v.<name>; training metadata rides in
// reserved meta.* entries (small integers stored exactly, 64-bit values
// bit-packed into pairs of f32 words).

#ifndef BACKDROP_CHECKPOINT_HPP
#define BACKDROP_CHECKPOINT_HPP

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "backdrop/model.hpp"
#include "backdrop/params.hpp"

namespace backdrop {

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'D', 'P', 'M', 'T'};

struct Checkpoint {
  uint32_t version = kCheckpointVersion;
  int stage = 1;
  int64_t step = 0;        // training steps completed
  uint64_t train_seed = 0; // RNG state: streams are derived from (seed, step)
  DiTConfig config;
  ParamStore params;
  std::map<std::string, std::vector<float>> opt_m;
  std::map<std::string, std::vector<float>> opt_v;
};

namespace detail {

inline std::vector<float> pack_u64(uint64_t v) {
  std::vector<float> out(2);
  std::memcpy(out.data(), &v, sizeof(v));
  return out;
}

inline uint64_t unpack_u64(const std::vector<float>& v) {
  if (v.size() != 2) fail("checkpoint: malformed 64-bit field");
  uint64_t out = 0;
  std::memcpy(&out, v.data(), sizeof(out));
  return out;
}

inline std::vector<float> encode_config(const DiTConfig& c) {
  std::vector<float> v = {static_cast<float>(c.depth),
                          static_cast<float>(c.model_dim),
                          static_cast<float>(c.heads),
                          static_cast<float>(c.prompt_len),
                          static_cast<float>(c.time_embed_dim),
                          static_cast<float>(c.patch_factor),
                          static_cast<float>(c.mlp_ratio),
                          static_cast<float>(c.num_classes),
                          static_cast<float>(static_cast<int>(c.integration)),
                          static_cast<float>(c.branch_depth),
                          static_cast<float>(c.lora_rank),
                          static_cast<float>(c.injection_sites.size())};
  for (int site : c.injection_sites) v.push_back(static_cast<float>(site));
  return v;
}

inline DiTConfig decode_config(const std::vector<float>& v) {
  if (v.size() < 12) fail("checkpoint: malformed config record");
  DiTConfig c;
  c.depth = static_cast<int>(v[0]);
  c.model_dim = static_cast<int>(v[1]);
  c.heads = static_cast<int>(v[2]);
  c.prompt_len = static_cast<int>(v[3]);
  c.time_embed_dim = static_cast<int>(v[4]);
  c.patch_factor = static_cast<int>(v[5]);
  c.mlp_ratio = static_cast<int>(v[6]);
  c.num_classes = static_cast<int>(v[7]);
  c.integration = static_cast<Integration>(static_cast<int>(v[8]));
  c.branch_depth = static_cast<int>(v[9]);
  c.lora_rank = static_cast<int>(v[10]);
  size_t n_sites = static_cast<size_t>(v[11]);
  if (v.size() != 12 + n_sites) fail("checkpoint: malformed config record");
  c.injection_sites.clear();
  for (size_t i = 0; i < n_sites; ++i) c.injection_sites.push_back(static_cast<int>(v[12 + i]));
  return c;
}

inline void put_u32(std::string& out, uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.append(b, 4);
}

inline void put_entry(std::string& out, const std::string& name, const Shape& shape,
                      const float* data, size_t count) {
  put_u32(out, static_cast<uint32_t>(name.size()));
  out.append(name);
  put_u32(out, static_cast<uint32_t>(shape.size()));
  for (int d : shape) put_u32(out, static_cast<uint32_t>(d));
  out.append(reinterpret_cast<const char*>(data), count * sizeof(float));
}

struct EntryReader {
  const std::string& bytes;
  size_t pos = 0;
  const std::string& path;

  bool done() const { return pos >= bytes.size(); }

  void need(size_t n, const std::string& what) {
    if (pos + n > bytes.size())
      fail("checkpoint " + path + " truncated in " + what + ": expected " + std::to_string(pos + n) +
           " bytes, got " + std::to_string(bytes.size()));
  }

  uint32_t read_u32(const std::string& what) {
    need(4, what);
    uint32_t v = 0;
    std::memcpy(&v, bytes.data() + pos, 4);
    pos += 4;
    return v;
  }

  void read_entry(std::string& name, Shape& shape, std::vector<float>& data) {
    uint32_t name_len = read_u32("entry header");
    if (name_len == 0 || name_len > 4096) fail("checkpoint " + path + ": implausible name length");
    need(name_len, "entry name");
    name.assign(bytes.data() + pos, name_len);
    pos += name_len;
    uint32_t rank = read_u32("rank of " + name);
    if (rank > 8) fail("checkpoint " + path + ": implausible rank for " + name);
    shape.clear();
    int64_t count = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t d = read_u32("extent of " + name);
      if (d == 0) fail("checkpoint " + path + ": zero extent in " + name);
      shape.push_back(static_cast<int>(d));
      count *= d;
    }
    need(static_cast<size_t>(count) * sizeof(float), "payload of " + name);
    data.resize(static_cast<size_t>(count));
    std::memcpy(data.data(), bytes.data() + pos, static_cast<size_t>(count) * sizeof(float));
    pos += static_cast<size_t>(count) * sizeof(float);
  }
};

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, ckpt.version);

  auto put_meta = [&](const std::string& name, const std::vector<float>& vals) {
    detail::put_entry(out, name, {static_cast<int>(vals.size())}, vals.data(), vals.size());
  };

  for (const auto& [name, t] : ckpt.params.params)
    detail::put_entry(out, name, t.shape(), t.data().data(), t.data().size());
  put_meta("meta.config", detail::encode_config(ckpt.config));
  put_meta("meta.seed", detail::pack_u64(ckpt.train_seed));
  put_meta("meta.stage", {static_cast<float>(ckpt.stage)});
  put_meta("meta.step", detail::pack_u64(static_cast<uint64_t>(ckpt.step)));
  for (const auto& [name, m] : ckpt.opt_m) put_meta("opt.m." + name, m);
  for (const auto& [name, v] : ckpt.opt_v) put_meta("opt.v." + name, v);

  // atomic write: temp file in the same directory, then rename
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) fail("cannot write checkpoint " + path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) fail("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("cannot read checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

  if (bytes.size() < 8) fail("checkpoint " + path.string() + " truncated: expected 8 header bytes, got " +
                             std::to_string(bytes.size()));
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    fail("checkpoint " + path.string() + ": bad magic bytes");
  uint32_t version = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kCheckpointVersion)
    fail("checkpoint " + path.string() + ": unsupported format version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.version = version;
  bool saw_config = false, saw_stage = false;
  detail::EntryReader reader{bytes, 8, path.string()};
  while (!reader.done()) {
    std::string name;
    Shape shape;
    std::vector<float> data;
    reader.read_entry(name, shape, data);
    if (name == "meta.config") {
      ckpt.config = detail::decode_config(data);
      saw_config = true;
    } else if (name == "meta.stage") {
      if (data.size() != 1) fail("checkpoint: malformed meta.stage");
      ckpt.stage = static_cast<int>(data[0]);
      saw_stage = true;
    } else if (name == "meta.step") {
      ckpt.step = static_cast<int64_t>(detail::unpack_u64(data));
    } else if (name == "meta.seed") {
      ckpt.train_seed = detail::unpack_u64(data);
    } else if (name.rfind("opt.m.", 0) == 0) {
      ckpt.opt_m[name.substr(6)] = std::move(data);
    } else if (name.rfind("opt.v.", 0) == 0) {
      ckpt.opt_v[name.substr(6)] = std::move(data);
    } else {
      Tensor t = Tensor::from(shape, std::move(data));
      t.set_requires_grad(true).set_name(name);
      if (ckpt.params.params.count(name)) fail("checkpoint: duplicate tensor " + name);
      ckpt.params.params.emplace(name, std::move(t));
    }
  }
  if (!saw_config || !saw_stage) fail("checkpoint " + path.string() + ": missing metadata records");

  // shape table sanity against the declared configuration
  ModelParams reference = init_model<float>(ckpt.config, 0);
  for (const auto& [name, t] : reference.store.params) {
    if (!ckpt.params.has(name))
      fail("checkpoint " + path.string() + ": missing tensor " + name);
    if (ckpt.params.at(name).shape() != t.shape())
      fail("checkpoint " + path.string() + ": tensor " + name + " has shape " +
           shape_str(ckpt.params.at(name).shape()) + ", expected " + shape_str(t.shape()));
  }
  return ckpt;
}

// Model view of a checkpoint: adapters are recognized by their lora.*
// parameter names.
inline ModelParams checkpoint_model(const Checkpoint& ckpt) {
  ModelParams mp;
  mp.config = ckpt.config;
  mp.store = ckpt.params;
  for (const auto& [name, t] : mp.store.params) {
    const std::string down_suffix = ".down";
    if (name.rfind("lora.", 0) == 0 &&
        name.size() > down_suffix.size() &&
        name.compare(name.size() - down_suffix.size(), down_suffix.size(), down_suffix) == 0) {
      mp.lora_layers.insert(name.substr(5, name.size() - 5 - down_suffix.size()));
    }
  }
  mp.lora_wrapped = !mp.lora_layers.empty();
  return mp;
}

inline Checkpoint checkpoint_from_model(const ModelParams& mp, int stage, int64_t step, uint64_t seed) {
  Checkpoint ckpt;
  ckpt.stage = stage;
  ckpt.step = step;
  ckpt.train_seed = seed;
  ckpt.config = mp.config;
  ckpt.params = mp.store;
  return ckpt;
}

}  // namespace backdrop

#endif  // BACKDROP_CHECKPOINT_HPP
