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

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "twospeed/data.hpp"
#include "twospeed/models.hpp"
#include "twospeed/table.hpp"

namespace twospeed {

enum class SaliencyMethod { occlusion, attention_rollout };

inline const char* to_string(SaliencyMethod m) { return m == SaliencyMethod::occlusion ? "occlusion" : "attention_rollout"; }

inline SaliencyMethod parse_saliency_method(const std::string& s) {
  if (s == "occlusion") return SaliencyMethod::occlusion;
  if (s == "attention_rollout") return SaliencyMethod::attention_rollout;
  throw InputError("unknown saliency method '" + s + "'");
}

struct SaliencyMap {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major, in [0,1]
  std::size_t target_class = 0;
  SaliencyMethod method = SaliencyMethod::occlusion;

  double at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
};

// Divides by the maximum; an all-nonpositive map becomes all zero.
inline void max_normalize(std::vector<double>& v) {
  const double m = v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  for (double& x : v) x = m > 0.0 ? std::max(0.0, x) / m : 0.0;
}

// Class probabilities for a [B x 3 x 32 x 32] batch scaled to [0,1].
using BatchPredictor = std::function<ProbabilityTable(const Tensor<float>&)>;

inline BatchPredictor model_predictor(const Model<float>& model) {
  return [&model](const Tensor<float>& x) {
    Model<float> m = model;
    m.set_mode(ops::Mode::eval);
    Tensor<float> p = m.forward(x);
    ProbabilityTable t(x.shape()[0], model.num_classes());
    for (std::size_t i = 0; i < p.size(); ++i) t.values[i] = double(p[i]);
    return t;
  };
}

struct OcclusionOptions {
  std::size_t window = 4;
  std::size_t stride = 2;
  std::array<double, 3> baseline{127.5, 127.5, 127.5};  // RGB, 0..255
  std::size_t batch_size = 64;
};

// Per-channel mean over the listed chips.
inline std::array<double, 3> mean_color(const ChipDataset& ds, std::span<const std::uint32_t> indices) {
  if (indices.empty()) throw InputError("mean color of an empty selection");
  std::array<double, 3> sum{0, 0, 0};
  for (auto i : indices) {
    const auto c = ds.chip(i);
    for (std::size_t p = 0; p < kChipPixels; ++p)
      for (std::size_t ch = 0; ch < 3; ++ch) sum[ch] += c[p * 3 + ch];
  }
  for (auto& s : sum) s /= double(indices.size() * kChipPixels);
  return sum;
}

// Window origins along one side: 0, stride, ... up to side - window.
inline std::vector<std::size_t> window_origins(std::size_t side, std::size_t window, std::size_t stride) {
  std::vector<std::size_t> o;
  for (std::size_t v = 0; v + window <= side; v += stride) o.push_back(v);
  return o;
}

// Occlusion sensitivity: each window is painted with the baseline colour and
// the drop in the target probability is clamped at 0 and averaged into every
// pixel the window covers.
inline SaliencyMap occlusion_map(const BatchPredictor& predict, std::size_t num_classes,
                                 std::span<const std::uint8_t> chip, std::size_t target, const OcclusionOptions& opt = {}) {
  if (target >= num_classes)
    throw InputError("target class " + std::to_string(target) + " out of range for " + std::to_string(num_classes) + " classes");
  if (chip.size() != kChipBytes) throw ShapeError("occlusion expects a 32x32 RGB chip");
  if (opt.window == 0 || opt.stride == 0 || opt.window > kChipSide) throw ParameterError("bad occlusion window or stride");
  const std::size_t S = kChipSide;
  const auto origins = window_origins(S, opt.window, opt.stride);
  std::vector<std::pair<std::size_t, std::size_t>> windows;
  for (auto y : origins)
    for (auto x : origins) windows.emplace_back(y, x);

  auto fill = [&](float* out, std::ptrdiff_t wi) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          double v = chip[(y * S + x) * 3 + c];
          if (wi >= 0) {
            const auto [wy, wx] = windows[std::size_t(wi)];
            if (y >= wy && y < wy + opt.window && x >= wx && x < wx + opt.window) v = opt.baseline[c];
          }
          out[(c * S + y) * S + x] = float(v / 255.0);
        }
  };

  Tensor<float> base(Shape{1, 3, S, S});
  fill(base.ptr(), -1);
  const ProbabilityTable p0 = predict(base);
  if (p0.cols != num_classes) throw ShapeError("predictor returned the wrong number of classes");
  const double ref = p0.values[target];

  std::vector<double> drops(windows.size());
  for (std::size_t start = 0; start < windows.size(); start += opt.batch_size) {
    const std::size_t n = std::min(opt.batch_size, windows.size() - start);
    Tensor<float> batch(Shape{n, 3, S, S});
    for (std::size_t i = 0; i < n; ++i) fill(batch.ptr() + i * 3 * S * S, std::ptrdiff_t(start + i));
    const ProbabilityTable p = predict(batch);
    for (std::size_t i = 0; i < n; ++i) drops[start + i] = std::max(0.0, ref - p.values[i * p.cols + target]);
  }

  std::vector<double> sum(S * S, 0.0), count(S * S, 0.0);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    const auto [wy, wx] = windows[w];
    for (std::size_t y = wy; y < wy + opt.window; ++y)
      for (std::size_t x = wx; x < wx + opt.window; ++x) sum[y * S + x] += drops[w], count[y * S + x] += 1.0;
  }
  SaliencyMap map{S, S, std::vector<double>(S * S, 0.0), target, SaliencyMethod::occlusion};
  for (std::size_t i = 0; i < S * S; ++i) map.values[i] = count[i] > 0 ? sum[i] / count[i] : 0.0;
  max_normalize(map.values);
  return map;
}

inline SaliencyMap occlusion_map(const Model<float>& model, std::span<const std::uint8_t> chip, std::size_t target,
                                 const OcclusionOptions& opt = {}) {
  return occlusion_map(model_predictor(model), model.num_classes(), chip, target, opt);
}

// Square matrix, row-major.
using SquareMatrix = std::vector<double>;

// Product of (0.5 A_l + 0.5 I) from the last layer down to the first.
inline SquareMatrix rollout_matrix(const std::vector<SquareMatrix>& layers, std::size_t tokens) {
  SquareMatrix r(tokens * tokens, 0.0);
  for (std::size_t i = 0; i < tokens; ++i) r[i * tokens + i] = 1.0;
  for (const auto& a : layers) {
    if (a.size() != tokens * tokens) throw ShapeError("attention matrix has the wrong size");
    SquareMatrix mixed(a);
    for (auto& v : mixed) v *= 0.5;
    for (std::size_t i = 0; i < tokens; ++i) mixed[i * tokens + i] += 0.5;
    SquareMatrix next(tokens * tokens, 0.0);
    for (std::size_t i = 0; i < tokens; ++i)
      for (std::size_t k = 0; k < tokens; ++k) {
        const double m = mixed[i * tokens + k];
        for (std::size_t j = 0; j < tokens; ++j) next[i * tokens + j] += m * r[k * tokens + j];
      }
    r = std::move(next);
  }
  return r;
}

// Class-token row of the rollout, patch part only, upsampled to pixels.
inline SaliencyMap rollout_to_map(const SquareMatrix& rollout, std::size_t grid, std::size_t patch, std::size_t target) {
  const std::size_t tokens = grid * grid + 1, side = grid * patch;
  if (rollout.size() != tokens * tokens) throw ShapeError("rollout does not match the patch grid");
  SaliencyMap map{side, side, std::vector<double>(side * side), target, SaliencyMethod::attention_rollout};
  for (std::size_t y = 0; y < side; ++y)
    for (std::size_t x = 0; x < side; ++x) map.values[y * side + x] = rollout[1 + (y / patch) * grid + x / patch];
  max_normalize(map.values);
  return map;
}

// Head-averaged attention per layer for one chip.
inline std::vector<SquareMatrix> attention_layers(const Model<float>& model, std::span<const std::uint8_t> chip) {
  if (model.kind() != ModelKind::vit) throw KindError("attention rollout needs a vit model, got " + to_string(model.kind()));
  const auto& cfg = std::get<VitConfig>(model.config());
  if (cfg.image_size != kChipSide) throw ShapeError("model image size differs from the chip size");
  Tensor<float> x(Shape{1, 3, kChipSide, kChipSide});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < kChipPixels; ++p) x[c * kChipPixels + p] = float(chip[p * 3 + c] / 255.0);
  Model<float> m = model;
  m.set_mode(ops::Mode::eval);
  std::vector<Tensor<float>> att;
  m.logits(x, nullptr, &att);
  const std::size_t t = cfg.num_patches() + 1, h = cfg.num_heads;
  std::vector<SquareMatrix> out;
  for (const auto& a : att) {
    if (a.size() != h * t * t) throw ShapeError("unexpected attention shape " + a.shape().str());
    SquareMatrix avg(t * t, 0.0);
    for (std::size_t head = 0; head < h; ++head)
      for (std::size_t i = 0; i < t * t; ++i) avg[i] += double(a[head * t * t + i]) / double(h);
    out.push_back(std::move(avg));
  }
  return out;
}

inline SaliencyMap attention_rollout(const Model<float>& model, std::span<const std::uint8_t> chip, std::size_t target = 0) {
  const auto layers = attention_layers(model, chip);
  const auto& cfg = std::get<VitConfig>(model.config());
  const std::size_t grid = cfg.image_size / cfg.patch_size;
  return rollout_to_map(rollout_matrix(layers, grid * grid + 1), grid, cfg.patch_size, target);
}

inline std::vector<std::uint8_t> map_to_gray(const SaliencyMap& map) {
  std::vector<std::uint8_t> g(map.values.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = std::uint8_t(std::lround(255.0 * std::clamp(map.values[i], 0.0, 1.0)));
  return g;
}

inline std::string pgm_bytes(const SaliencyMap& map) {
  const auto g = map_to_gray(map);
  std::string out = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
  out.append(g.begin(), g.end());
  return out;
}

inline void write_map_image(const SaliencyMap& map, const std::filesystem::path& path) {
  io::write_file_atomic(path, pgm_bytes(map));
}

inline SaliencyMap read_map_image(const std::filesystem::path& path) {
  const auto img = detail::parse_pnm(io::read_file(path), path.string(), '5', 1);
  SaliencyMap map{img.height, img.width, std::vector<double>(img.pixels.size()), 0, SaliencyMethod::occlusion};
  for (std::size_t i = 0; i < img.pixels.size(); ++i) map.values[i] = img.pixels[i] / 255.0;
  return map;
}

// Chip on the left, map as gray on the right.
inline void write_montage(std::span<const std::uint8_t> chip, const SaliencyMap& map, const std::filesystem::path& path) {
  if (map.height != kChipSide || map.width != kChipSide) throw ShapeError("montage needs a 32x32 map");
  const auto g = map_to_gray(map);
  const std::size_t w = 2 * kChipSide;
  std::vector<std::uint8_t> rgb(w * kChipSide * 3);
  for (std::size_t y = 0; y < kChipSide; ++y)
    for (std::size_t x = 0; x < kChipSide; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        rgb[(y * w + x) * 3 + c] = chip[(y * kChipSide + x) * 3 + c];
        rgb[(y * w + x + kChipSide) * 3 + c] = g[y * kChipSide + x];
      }
  write_ppm(path, w, kChipSide, rgb);
}

// Mean saliency on and off a boolean pixel mask.
inline std::pair<double, double> masked_means(const SaliencyMap& map, const std::vector<bool>& mask) {
  if (mask.size() != map.values.size()) throw ShapeError("mask size differs from map size");
  double on = 0, off = 0;
  std::size_t n_on = 0, n_off = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) (mask[i] ? (on += map.values[i], ++n_on) : (off += map.values[i], ++n_off));
  return {n_on ? on / double(n_on) : 0.0, n_off ? off / double(n_off) : 0.0};
}

}  // namespace twospeed
