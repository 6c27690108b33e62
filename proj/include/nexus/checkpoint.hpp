// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory layout:
//   config.json    model kind, ModelConfig fields, router metadata
//   manifest.json  {"tensors": [{"name", "shape", "file", "dtype"}]}
//   <name>.bin     raw little-endian float32 values, row-major

#pragma once

#include <openssl/evp.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "nexus/error.hpp"
#include "nexus/moe.hpp"
#include "nexus/transformer.hpp"

namespace nexus {

namespace detail {

struct SerializedCheckpoint {
  std::string config;
  std::string manifest;
  std::vector<std::pair<std::string, std::string>> files;  // (file name, bytes)
};

template <std::floating_point T>
std::string encode_f32(const Tensor<T>& t) {
  std::string bytes(t.numel() * 4, '\0');
  auto d = t.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(d[i]));
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    std::memcpy(bytes.data() + 4 * i, &bits, 4);
  }
  return bytes;
}

template <std::floating_point T>
Tensor<T> decode_f32(const std::string& bytes, const Shape& shape, const std::string& what) {
  if (bytes.size() != shape_numel(shape) * 4) {
    throw IoError("tensor file " + what + " has " + std::to_string(bytes.size()) +
                  " bytes, expected " + std::to_string(shape_numel(shape) * 4));
  }
  std::vector<T> data(shape_numel(shape));
  for (std::size_t i = 0; i < data.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
    data[i] = static_cast<T>(std::bit_cast<float>(bits));
  }
  return Tensor<T>(shape, std::move(data));
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + p.string());
}

inline std::string sha256_hex(const std::vector<const std::string*>& parts) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  for (const auto* p : parts) EVP_DigestUpdate(ctx, p->data(), p->size());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

/// Covers the manifest and tensor bytes; config.json metadata (such as an
/// expert's domain label) does not change the hash.
inline std::string hash_serialized(const SerializedCheckpoint& s) {
  std::vector<const std::string*> parts{&s.manifest};
  for (const auto& [name, bytes] : s.files) {
    parts.push_back(&name);
    parts.push_back(&bytes);
  }
  return sha256_hex(parts);
}

template <class Model>
SerializedCheckpoint serialize(const Model& model, nlohmann::json config) {
  SerializedCheckpoint s;
  nlohmann::json tensors = nlohmann::json::array();
  model.for_each_parameter([&](const std::string& name, const auto& t) {
    const std::string file = name + ".bin";
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"file", file}, {"dtype", "float32"}});
    s.files.emplace_back(file, encode_f32(t));
  });
  s.config = config.dump(2) + "\n";
  s.manifest = nlohmann::json{{"tensors", tensors}}.dump(2) + "\n";
  return s;
}

template <std::floating_point T>
nlohmann::json config_json(const DenseModelState<T>& m) {
  return {{"kind", "dense"}, {"model", m.config}, {"domain", m.domain}};
}

template <std::floating_point T>
nlohmann::json config_json(const MoEModelState<T>& m) {
  nlohmann::json j{{"kind", "moe"},
                   {"model", m.config},
                   {"router", to_string(m.router_kind)},
                   {"n_experts", m.num_experts()},
                   {"k", m.k},
                   {"lb_factor", m.lb_factor},
                   {"domains", m.domains}};
  if (m.domain_embeddings.defined()) j["domain_embedding_dim"] = m.domain_embeddings.dim(1);
  return j;
}

inline void write_serialized(const std::filesystem::path& dir, const SerializedCheckpoint& s) {
  std::filesystem::create_directories(dir);
  write_file(dir / "config.json", s.config);
  write_file(dir / "manifest.json", s.manifest);
  for (const auto& [file, bytes] : s.files) write_file(dir / file, bytes);
}

struct LoadedTensors {
  nlohmann::json config;
  std::map<std::string, std::pair<Shape, std::string>> tensors;  // name -> (shape, bytes)
};

inline LoadedTensors read_checkpoint_files(const std::filesystem::path& dir) {
  LoadedTensors out;
  try {
    out.config = nlohmann::json::parse(read_file(dir / "config.json"));
    auto manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
    for (const auto& t : manifest.at("tensors")) {
      const auto file = t.at("file").get<std::string>();
      out.tensors[t.at("name").get<std::string>()] = {t.at("shape").get<Shape>(), read_file(dir / file)};
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint " + dir.string() + ": " + e.what());
  }
  return out;
}

template <std::floating_point T, class Model>
void assign_tensors(Model& model, const LoadedTensors& files, const std::filesystem::path& dir) {
  std::size_t used = 0;
  model.for_each_parameter([&](const std::string& name, Tensor<T>& t) {
    auto it = files.tensors.find(name);
    if (it == files.tensors.end()) throw IoError("checkpoint " + dir.string() + " lacks tensor " + name);
    t = decode_f32<T>(it->second.second, it->second.first, name);
    t.set_requires_grad(name != "domain_embeddings");
    ++used;
  });
  if (used != files.tensors.size()) {
    throw IoError("checkpoint " + dir.string() + " holds tensors this model layout does not use");
  }
}

}  // namespace detail

inline std::string read_model_kind(const std::filesystem::path& dir) {
  try {
    return nlohmann::json::parse(detail::read_file(dir / "config.json")).at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint config in " + dir.string() + ": " + e.what());
  }
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& dir, const DenseModelState<T>& m) {
  detail::write_serialized(dir, detail::serialize(m, detail::config_json(m)));
}

template <std::floating_point T>
void save_checkpoint(const std::filesystem::path& dir, const MoEModelState<T>& m) {
  detail::write_serialized(dir, detail::serialize(m, detail::config_json(m)));
}

/// SHA-256 over the manifest and tensor files save_checkpoint would write.
template <class Model>
std::string state_hash(const Model& m) {
  return detail::hash_serialized(detail::serialize(m, detail::config_json(m)));
}

/// SHA-256 of a checkpoint directory, equal to state_hash of the saved model.
inline std::string checkpoint_hash(const std::filesystem::path& dir) {
  detail::SerializedCheckpoint s;
  s.config = detail::read_file(dir / "config.json");
  s.manifest = detail::read_file(dir / "manifest.json");
  try {
    const auto manifest = nlohmann::json::parse(s.manifest);
    for (const auto& t : manifest.at("tensors")) {
      const auto file = t.at("file").get<std::string>();
      s.files.emplace_back(file, detail::read_file(dir / file));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in " + dir.string() + ": " + e.what());
  }
  return detail::hash_serialized(s);
}

template <std::floating_point T>
DenseModelState<T> load_dense(const std::filesystem::path& dir) {
  auto files = detail::read_checkpoint_files(dir);
  if (files.config.value("kind", "") != "dense") throw IoError(dir.string() + " is not a dense checkpoint");
  DenseModelState<T> m;
  m.config = files.config.at("model").get<ModelConfig>();
  m.config.validate();
  m.domain = files.config.value("domain", "");
  m.blocks.resize(m.config.n_layers);
  detail::assign_tensors<T>(m, files, dir);
  return m;
}

template <std::floating_point T>
MoEModelState<T> load_moe(const std::filesystem::path& dir) {
  auto files = detail::read_checkpoint_files(dir);
  const auto& c = files.config;
  if (c.value("kind", "") != "moe") throw IoError(dir.string() + " is not an MoE checkpoint");
  MoEModelState<T> m;
  try {
    m.config = c.at("model").get<ModelConfig>();
    m.router_kind = parse_router_kind(c.at("router").get<std::string>());
    m.k = c.at("k").get<std::size_t>();
    m.lb_factor = c.at("lb_factor").get<double>();
    m.domains = c.at("domains").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed MoE config in " + dir.string() + ": " + e.what());
  }
  m.config.validate();
  const std::size_t n = c.value("n_experts", m.domains.size());
  if (n != m.domains.size()) throw IoError("MoE config: n_experts disagrees with domain list");
  for (std::size_t l = 0; l < m.config.n_layers; ++l) {
    MoEBlock<T> b;
    b.moe.experts.resize(n);
    b.moe.k = m.k;
    if (m.router_kind == RouterKind::Linear) {
      b.moe.router = LinearRouterState<T>{};
    } else {
      b.moe.router = DomainProjectionState<T>{};
    }
    m.blocks.push_back(std::move(b));
  }
  if (m.router_kind == RouterKind::Nexus) {
    if (!files.tensors.contains("domain_embeddings")) throw IoError("nexus checkpoint lacks domain_embeddings");
    m.domain_embeddings = Tensor<T>(Shape{1});  // placeholder so the visitor includes it
  }
  detail::assign_tensors<T>(m, files, dir);
  for (auto& b : m.blocks) {
    if (auto* p = std::get_if<DomainProjectionState<T>>(&b.moe.router)) p->domain_embeddings = m.domain_embeddings;
    b.moe.validate();
  }
  return m;
}

}  // namespace nexus
