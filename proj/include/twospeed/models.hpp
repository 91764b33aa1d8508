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

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "twospeed/errors.hpp"
#include "twospeed/ops.hpp"
#include "twospeed/random.hpp"
#include "twospeed/tensor.hpp"

namespace twospeed {

enum class ModelKind : std::uint8_t { hs_cnn = 1, vit = 2 };

inline std::string to_string(ModelKind k) { return k == ModelKind::hs_cnn ? "hs_cnn" : "vit"; }

struct HsCnnConfig {
  std::vector<std::array<std::size_t, 2>> block_filters{{32, 32}, {64, 64}, {128, 128}};
  std::vector<std::size_t> dense_sizes{1024, 512};
  double dropout_rate = 0.25;
  double l2_lambda = 1e-4;
  std::size_t num_classes = 17;
  std::size_t input_size = 32;

  static HsCnnConfig reference(std::size_t classes = 17) {
    HsCnnConfig c;
    c.num_classes = classes;
    return c;
  }
  static HsCnnConfig mini(std::size_t classes = 6) {
    HsCnnConfig c;
    c.block_filters = {{8, 8}, {16, 16}, {32, 32}};
    c.dense_sizes = {64};
    c.dropout_rate = 0.1;
    c.num_classes = classes;
    return c;
  }

  void validate() const {
    if (block_filters.size() != 3) throw ConfigError("HS-CNN needs exactly 3 convolution blocks");
    for (const auto& b : block_filters)
      if (b[0] == 0 || b[1] == 0) throw ConfigError("HS-CNN filter widths must be positive");
    for (auto d : dense_sizes)
      if (d == 0) throw ConfigError("HS-CNN dense widths must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0,1)");
    if (!(l2_lambda >= 0.0 && std::isfinite(l2_lambda))) throw ConfigError("l2_lambda must be nonnegative");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (input_size == 0 || input_size % 8) throw ConfigError("input_size must be a positive multiple of 8");
  }

  bool operator==(const HsCnnConfig&) const = default;
};

struct VitConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 8;
  std::size_t hidden_dim = 64;
  std::size_t mlp_dim = 128;
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t num_classes = 17;
  double dropout_rate = 0.0;

  static VitConfig tiny(std::size_t classes = 17) {
    VitConfig c;
    c.num_classes = classes;
    return c;
  }
  // 768 hidden, 3072 MLP, 12 layers, 12 heads, 16-pixel patches on 224.
  static VitConfig reference(std::size_t classes = 17) {
    return VitConfig{224, 16, 768, 3072, 12, 12, classes, 0.0};
  }

  std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }

  void validate() const {
    if (image_size == 0 || patch_size == 0 || image_size % patch_size)
      throw ConfigError("image_size must be a positive multiple of patch_size");
    if (hidden_dim == 0 || num_heads == 0 || hidden_dim % num_heads)
      throw ConfigError("hidden_dim must be a positive multiple of num_heads");
    if (mlp_dim == 0 || num_layers == 0) throw ConfigError("mlp_dim and num_layers must be positive");
    if (num_classes == 0) throw ConfigError("num_classes must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must lie in [0,1)");
  }

  bool operator==(const VitConfig&) const = default;
};

using ModelConfig = std::variant<HsCnnConfig, VitConfig>;

inline ModelKind kind_of(const ModelConfig& c) {
  return std::holds_alternative<HsCnnConfig>(c) ? ModelKind::hs_cnn : ModelKind::vit;
}

inline std::size_t num_classes_of(const ModelConfig& c) {
  return std::visit([](const auto& x) { return x.num_classes; }, c);
}

inline void validate(const ModelConfig& c) {
  std::visit([](const auto& x) { x.validate(); }, c);
}

// Multiply-accumulate count of one forward pass for one sample.
inline double forward_macs(const ModelConfig& c) {
  if (const auto* cnn = std::get_if<HsCnnConfig>(&c)) {
    double macs = 0, side = double(cnn->input_size);
    std::size_t in = 3;
    for (const auto& b : cnn->block_filters) {
      macs += side * side * 9.0 * double(in * b[0] + b[0] * b[1]);
      in = b[1];
      side /= 2;
    }
    std::size_t din = in * std::size_t(side * side);
    for (auto d : cnn->dense_sizes) macs += double(din * d), din = d;
    return macs + double(din * cnn->num_classes);
  }
  const auto& v = std::get<VitConfig>(c);
  const double t = double(v.num_patches() + 1), d = double(v.hidden_dim);
  const double patch = double(v.num_patches()) * 3.0 * double(v.patch_size * v.patch_size) * d;
  const double layer = t * (4.0 * d * d + 2.0 * d * double(v.mlp_dim)) + 2.0 * t * t * d;
  return patch + double(v.num_layers) * layer + d * double(v.num_classes);
}

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  bool decay = false;  // receives decoupled weight decay
};

// A network of either family: configuration, named parameters in a fixed
// order, and a train/eval mode.
template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::vector<Parameter<T>> params)
      : config_(std::move(config)), params_(std::move(params)) {}

  ModelKind kind() const { return kind_of(config_); }
  const ModelConfig& config() const { return config_; }
  std::size_t num_classes() const { return num_classes_of(config_); }
  std::size_t input_size() const {
    if (const auto* c = std::get_if<HsCnnConfig>(&config_)) return c->input_size;
    return std::get<VitConfig>(config_).image_size;
  }

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }

  const Tensor<T>& param(std::string_view name) const {
    for (const auto& p : params_)
      if (p.name == name) return p.value;
    throw UsageError("no parameter named " + std::string(name));
  }
  Tensor<T>& param(std::string_view name) {
    return const_cast<Tensor<T>&>(static_cast<const Model&>(*this).param(name));
  }

  ops::Mode mode() const { return mode_; }
  void set_mode(ops::Mode m) { mode_ = m; }

  // Independent copy of all parameter values; gradients are not copied.
  Model clone() const {
    std::vector<Parameter<T>> copy;
    copy.reserve(params_.size());
    for (const auto& p : params_) {
      Tensor<T> v = p.value.clone();
      v.set_requires_grad(p.value.requires_grad());
      copy.push_back({p.name, v, p.decay});
    }
    Model m(config_, std::move(copy));
    m.mode_ = mode_;
    return m;
  }

  // Pre-softmax scores [B x num_classes] for a batch [B x 3 x S x S] of
  // pixels in [0,1]. Train mode with dropout needs `rng`. For a ViT,
  // `attention` (if given) receives each layer's weights [B x heads x T x T].
  Tensor<T> logits(const Tensor<T>& batch, Rng* rng = nullptr, std::vector<Tensor<T>>* attention = nullptr) const {
    const auto& s = batch.shape();
    const std::size_t side = input_size();
    if (s.rank() != 4 || s[1] != 3 || s[2] != side || s[3] != side)
      throw ShapeError("model expects a batch [B x 3 x " + std::to_string(side) + " x " + std::to_string(side) +
                       "], got " + s.str());
    const double rate = std::visit([](const auto& c) { return c.dropout_rate; }, config_);
    if (mode_ == ops::Mode::train && rate > 0.0 && rng == nullptr)
      throw UsageError("train-mode forward with dropout needs a random generator");
    Rng unused(0);
    Rng& r = rng ? *rng : unused;
    if (attention) attention->clear();
    return kind() == ModelKind::hs_cnn ? cnn_logits(batch, r) : vit_logits(batch, r, attention);
  }

  // Class probabilities; each row sums to 1.
  Tensor<T> forward(const Tensor<T>& batch, Rng* rng = nullptr) const { return ops::softmax(logits(batch, rng)); }

 private:
  Tensor<T> cnn_logits(const Tensor<T>& batch, Rng& rng) const {
    const auto& cfg = std::get<HsCnnConfig>(config_);
    Tensor<T> x = batch;
    std::size_t i = 0;
    for (std::size_t b = 0; b < 3; ++b) {
      x = ops::relu(ops::conv2d(x, params_[i].value, params_[i + 1].value));
      x = ops::relu(ops::conv2d(x, params_[i + 2].value, params_[i + 3].value));
      x = ops::dropout(ops::maxpool2d(x), cfg.dropout_rate, mode_, rng);
      i += 4;
    }
    const std::size_t n = x.shape()[0];
    x = ops::reshape(x, Shape{n, x.size() / n});
    for (std::size_t d = 0; d < cfg.dense_sizes.size(); ++d, i += 2)
      x = ops::relu(ops::linear(x, params_[i].value, params_[i + 1].value));
    return ops::linear(x, params_[i].value, params_[i + 1].value);
  }

  Tensor<T> vit_logits(const Tensor<T>& batch, Rng& rng, std::vector<Tensor<T>>* attention) const {
    const auto& cfg = std::get<VitConfig>(config_);
    auto p = [&](std::size_t i) -> const Tensor<T>& { return params_[i].value; };
    Tensor<T> x = ops::linear(ops::patchify(batch, cfg.patch_size), p(0), p(1));
    x = ops::add(ops::prepend_token(x, p(2)), p(3));
    x = ops::dropout(x, cfg.dropout_rate, mode_, rng);
    std::size_t i = 4;
    for (std::size_t l = 0; l < cfg.num_layers; ++l, i += 16) {
      Tensor<T> h = ops::layer_norm(x, p(i), p(i + 1));
      Tensor<T> probs;
      h = multi_head_attention(h, p(i + 2), p(i + 3), p(i + 4), p(i + 5), p(i + 6), p(i + 7), p(i + 8), p(i + 9),
                               cfg.num_heads, attention ? &probs : nullptr);
      if (attention) attention->push_back(probs);
      x = ops::add(x, ops::dropout(h, cfg.dropout_rate, mode_, rng));
      h = ops::layer_norm(x, p(i + 10), p(i + 11));
      h = ops::linear(ops::gelu(ops::linear(h, p(i + 12), p(i + 13))), p(i + 14), p(i + 15));
      x = ops::add(x, ops::dropout(h, cfg.dropout_rate, mode_, rng));
    }
    x = ops::select_token(ops::layer_norm(x, p(i), p(i + 1)), 0);
    return ops::linear(x, p(i + 2), p(i + 3));
  }

  ModelConfig config_;
  std::vector<Parameter<T>> params_;
  ops::Mode mode_ = ops::Mode::eval;

 public:
  // Self-attention over x [.. x T x d]: project to q, k, v, attend per head,
  // project back.
  static Tensor<T> multi_head_attention(const Tensor<T>& x, const Tensor<T>& wq, const Tensor<T>& bq,
                                        const Tensor<T>& wk, const Tensor<T>& bk, const Tensor<T>& wv,
                                        const Tensor<T>& bv, const Tensor<T>& wo, const Tensor<T>& bo,
                                        std::size_t heads, Tensor<T>* probs = nullptr) {
    Tensor<T> q = ops::linear(x, wq, bq), k = ops::linear(x, wk, bk), v = ops::linear(x, wv, bv);
    return ops::linear(ops::attention(q, k, v, heads, probs), wo, bo);
  }
};

namespace detail {

template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double limit = std::sqrt(6.0 / double(fan_in));
  std::uniform_real_distribution<double> u(-limit, limit);
  for (auto& v : t.data()) v = T(u(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& v : t.data()) v = T(n(rng));
  t.set_requires_grad(true);
  return t;
}

// Small classifier heads keep untrained outputs close to uniform.
inline constexpr double kHeadInitStddev = 0.02;

template <typename T>
Tensor<T> filled(Shape shape, T value) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = value;
  t.set_requires_grad(true);
  return t;
}

}  // namespace detail

template <typename T>
Model<T> build_hs_cnn(const HsCnnConfig& cfg, Rng& rng) {
  cfg.validate();
  std::vector<Parameter<T>> ps;
  std::size_t in = 3;
  for (std::size_t b = 0; b < 3; ++b) {
    const std::string block = "block" + std::to_string(b + 1);
    for (std::size_t j = 0; j < 2; ++j) {
      const std::size_t out = cfg.block_filters[b][j];
      const std::string conv = block + ".conv" + std::to_string(j + 1);
      ps.push_back({conv + ".weight", detail::he_uniform<T>(Shape{out, in, 3, 3}, in * 9, rng), false});
      ps.push_back({conv + ".bias", detail::filled<T>(Shape{out}, T(0)), false});
      in = out;
    }
  }
  const std::size_t side = cfg.input_size / 8;
  std::size_t din = in * side * side;
  for (std::size_t d = 0; d < cfg.dense_sizes.size(); ++d) {
    const std::string name = "dense" + std::to_string(d + 1);
    ps.push_back({name + ".weight", detail::he_uniform<T>(Shape{din, cfg.dense_sizes[d]}, din, rng), true});
    ps.push_back({name + ".bias", detail::filled<T>(Shape{cfg.dense_sizes[d]}, T(0)), false});
    din = cfg.dense_sizes[d];
  }
  ps.push_back({"head.weight", detail::normal_init<T>(Shape{din, cfg.num_classes}, detail::kHeadInitStddev, rng), false});
  ps.push_back({"head.bias", detail::filled<T>(Shape{cfg.num_classes}, T(0)), false});
  return Model<T>(cfg, std::move(ps));
}

template <typename T>
Model<T> build_vit(const VitConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::size_t d = cfg.hidden_dim, pdim = 3 * cfg.patch_size * cfg.patch_size;
  std::vector<Parameter<T>> ps;
  auto dense = [&](const std::string& name, std::size_t din, std::size_t dout) {
    ps.push_back({name + ".weight", detail::he_uniform<T>(Shape{din, dout}, din, rng), false});
    ps.push_back({name + ".bias", detail::filled<T>(Shape{dout}, T(0)), false});
  };
  auto norm = [&](const std::string& name) {
    ps.push_back({name + ".gamma", detail::filled<T>(Shape{d}, T(1)), false});
    ps.push_back({name + ".beta", detail::filled<T>(Shape{d}, T(0)), false});
  };
  dense("patch_embed", pdim, d);
  ps.push_back({"cls_token", detail::normal_init<T>(Shape{d}, 0.02, rng), false});
  ps.push_back({"pos_embed", detail::normal_init<T>(Shape{cfg.num_patches() + 1, d}, 0.02, rng), false});
  for (std::size_t l = 0; l < cfg.num_layers; ++l) {
    const std::string pre = "encoder." + std::to_string(l) + ".";
    norm(pre + "ln1");
    for (const char* proj : {"q", "k", "v", "out"}) dense(pre + "attn." + proj, d, d);
    norm(pre + "ln2");
    dense(pre + "mlp.fc1", d, cfg.mlp_dim);
    dense(pre + "mlp.fc2", cfg.mlp_dim, d);
  }
  norm("ln_final");
  ps.push_back({"head.weight", detail::normal_init<T>(Shape{d, cfg.num_classes}, detail::kHeadInitStddev, rng), false});
  ps.push_back({"head.bias", detail::filled<T>(Shape{cfg.num_classes}, T(0)), false});
  return Model<T>(cfg, std::move(ps));
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg, Rng& rng) {
  if (const auto* c = std::get_if<HsCnnConfig>(&cfg)) return build_hs_cnn<T>(*c, rng);
  return build_vit<T>(std::get<VitConfig>(cfg), rng);
}

template <typename T>
std::size_t param_count(const Model<T>& m) {
  std::size_t n = 0;
  for (const auto& p : m.parameters()) n += p.value.size();
  return n;
}

}  // namespace twospeed
