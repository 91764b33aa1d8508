/**
 * Copyright 2026 The twospeed Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */
#pragma once

// Model file layout (all integers little-endian):
//   "TSPD" | u16 version | u8 kind | u8 scalar bytes (4 or 8) | config block |
//   u32 parameter count | per parameter: u32 name length, name, u8 rank,
//   u32 dims..., IEEE-754 payload.
// Config block, HS-CNN: u32 input_size, u32 num_classes, 6 x u32 filter
// widths, u32 dense count, u32 dense widths..., f64 dropout, f64 l2.
// Config block, ViT: u32 image, patch, hidden, mlp, layers, heads, classes,
// f64 dropout.

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "twospeed/io.hpp"
#include "twospeed/models.hpp"

namespace twospeed {

inline constexpr std::uint16_t kModelFormatVersion = 1;

namespace detail {

inline void put_config(io::ByteWriter& w, const ModelConfig& config) {
  auto u32 = [&](std::size_t v) {
    if (v > std::numeric_limits<std::uint32_t>::max()) throw ConfigError("config value too large to store");
    w.put_uint(std::uint32_t(v));
  };
  if (const auto* c = std::get_if<HsCnnConfig>(&config)) {
    u32(c->input_size);
    u32(c->num_classes);
    for (const auto& b : c->block_filters) u32(b[0]), u32(b[1]);
    u32(c->dense_sizes.size());
    for (auto d : c->dense_sizes) u32(d);
    w.put_f64(c->dropout_rate);
    w.put_f64(c->l2_lambda);
  } else {
    const auto& v = std::get<VitConfig>(config);
    for (auto x : {v.image_size, v.patch_size, v.hidden_dim, v.mlp_dim, v.num_layers, v.num_heads, v.num_classes})
      u32(x);
    w.put_f64(v.dropout_rate);
  }
}

inline ModelConfig get_config(io::ByteReader& r, ModelKind kind) {
  auto u32 = [&] { return std::size_t(r.get_uint<std::uint32_t>()); };
  if (kind == ModelKind::hs_cnn) {
    HsCnnConfig c;
    c.input_size = u32();
    c.num_classes = u32();
    c.block_filters.assign(3, {0, 0});
    for (auto& b : c.block_filters) b[0] = u32(), b[1] = u32();
    const std::size_t n = u32();
    if (n > 64) throw LoadError("implausible dense layer count " + std::to_string(n));
    c.dense_sizes.resize(n);
    for (auto& d : c.dense_sizes) d = u32();
    c.dropout_rate = r.get_f64();
    c.l2_lambda = r.get_f64();
    return c;
  }
  VitConfig v;
  v.image_size = u32();
  v.patch_size = u32();
  v.hidden_dim = u32();
  v.mlp_dim = u32();
  v.num_layers = u32();
  v.num_heads = u32();
  v.num_classes = u32();
  v.dropout_rate = r.get_f64();
  return v;
}

// Parameter names and shapes the config implies, without allocating weights.
inline std::vector<std::pair<std::string, Shape>> parameter_layout(const ModelConfig& config) {
  std::vector<std::pair<std::string, Shape>> out;
  if (const auto* c = std::get_if<HsCnnConfig>(&config)) {
    std::size_t in = 3;
    for (std::size_t b = 0; b < 3; ++b)
      for (std::size_t j = 0; j < 2; ++j) {
        const std::size_t o = c->block_filters[b][j];
        const std::string conv = "block" + std::to_string(b + 1) + ".conv" + std::to_string(j + 1);
        out.emplace_back(conv + ".weight", Shape{o, in, 3, 3});
        out.emplace_back(conv + ".bias", Shape{o});
        in = o;
      }
    std::size_t din = in * (c->input_size / 8) * (c->input_size / 8);
    for (std::size_t d = 0; d < c->dense_sizes.size(); ++d) {
      const std::string name = "dense" + std::to_string(d + 1);
      out.emplace_back(name + ".weight", Shape{din, c->dense_sizes[d]});
      out.emplace_back(name + ".bias", Shape{c->dense_sizes[d]});
      din = c->dense_sizes[d];
    }
    out.emplace_back("head.weight", Shape{din, c->num_classes});
    out.emplace_back("head.bias", Shape{c->num_classes});
    return out;
  }
  const auto& v = std::get<VitConfig>(config);
  const std::size_t d = v.hidden_dim;
  auto dense = [&](const std::string& n, std::size_t a, std::size_t b) {
    out.emplace_back(n + ".weight", Shape{a, b});
    out.emplace_back(n + ".bias", Shape{b});
  };
  auto norm = [&](const std::string& n) {
    out.emplace_back(n + ".gamma", Shape{d});
    out.emplace_back(n + ".beta", Shape{d});
  };
  dense("patch_embed", 3 * v.patch_size * v.patch_size, d);
  out.emplace_back("cls_token", Shape{d});
  out.emplace_back("pos_embed", Shape{v.num_patches() + 1, d});
  for (std::size_t l = 0; l < v.num_layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l) + ".";
    norm(pre + "ln1");
    for (const char* p : {"q", "k", "v", "out"}) dense(pre + "attn." + p, d, d);
    norm(pre + "ln2");
    dense(pre + "mlp.fc1", d, v.mlp_dim);
    dense(pre + "mlp.fc2", v.mlp_dim, d);
  }
  norm("ln_final");
  dense("head", d, v.num_classes);
  return out;
}

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> save_model(const Model<T>& model) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  io::ByteWriter w;
  w.put_bytes("TSPD");
  w.put_uint(kModelFormatVersion);
  w.put_uint(std::uint8_t(model.kind()));
  w.put_uint(std::uint8_t(sizeof(T)));
  detail::put_config(w, model.config());
  w.put_uint(std::uint32_t(model.parameters().size()));
  for (const auto& p : model.parameters()) {
    w.put_uint(std::uint32_t(p.name.size()));
    w.put_bytes(p.name);
    const auto& dims = p.value.shape().dims();
    w.put_uint(std::uint8_t(dims.size()));
    for (auto d : dims) w.put_uint(std::uint32_t(d));
    for (T v : p.value.data()) {
      if constexpr (std::is_same_v<T, float>)
        w.put_f32(v);
      else
        w.put_f64(v);
    }
  }
  return w.take();
}

// Parses a model stream. Any defect raises LoadError; nothing is returned
// unless the whole stream was consumed and matched its header.
template <typename T>
Model<T> load_model(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  if (r.get_bytes(4) != "TSPD") throw LoadError("bad magic; not a model file");
  const auto version = r.get_uint<std::uint16_t>();
  if (version != kModelFormatVersion)
    throw LoadError("unsupported model format version " + std::to_string(version));
  const auto kind_tag = r.get_uint<std::uint8_t>();
  if (kind_tag != std::uint8_t(ModelKind::hs_cnn) && kind_tag != std::uint8_t(ModelKind::vit))
    throw LoadError("unknown model kind tag " + std::to_string(kind_tag));
  const auto scalar = r.get_uint<std::uint8_t>();
  if (scalar != 4 && scalar != 8) throw LoadError("unknown scalar width " + std::to_string(scalar));
  ModelConfig config = detail::get_config(r, ModelKind(kind_tag));
  try {
    validate(config);
  } catch (const ConfigError& e) {
    throw LoadError(std::string("stored config is invalid: ") + e.what());
  }
  const auto layout = detail::parameter_layout(config);
  const auto count = r.get_uint<std::uint32_t>();
  if (count != layout.size())
    throw LoadError("config implies " + std::to_string(layout.size()) + " parameters, stream holds " +
                    std::to_string(count));
  std::vector<Parameter<T>> params;
  params.reserve(count);
  for (const auto& [name, shape] : layout) {
    const auto len = r.get_uint<std::uint32_t>();
    if (len > 4096) throw LoadError("implausible parameter name length");
    const std::string got = r.get_bytes(len);
    if (got != name) throw LoadError("expected parameter '" + name + "', found '" + got + "'");
    const auto rank = r.get_uint<std::uint8_t>();
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = r.get_uint<std::uint32_t>();
    if (dims != shape.dims())
      throw LoadError("parameter '" + name + "' stored with a shape that does not match its config " + shape.str());
    if (r.remaining() < shape.numel() * scalar) throw LoadError("truncated payload for parameter '" + name + "'");
    std::vector<T> data(shape.numel());
    for (auto& v : data) v = scalar == 4 ? T(r.get_f32()) : T(r.get_f64());
    const bool decay = std::holds_alternative<HsCnnConfig>(config) && name.rfind("dense", 0) == 0 &&
                       name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
    params.push_back({name, Tensor<T>(shape, std::move(data), true), decay});
  }
  if (r.remaining() != 0) throw LoadError(std::to_string(r.remaining()) + " trailing bytes after last parameter");
  return Model<T>(std::move(config), std::move(params));
}

template <typename T>
void save_model_file(const Model<T>& model, const std::filesystem::path& path) {
  io::write_file_atomic(path, save_model(model));
}

template <typename T>
Model<T> load_model_file(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw LoadError("model file not found: " + path.string());
  return load_model<T>(io::read_file(path));
}

}  // namespace twospeed
