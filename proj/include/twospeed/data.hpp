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
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "twospeed/errors.hpp"
#include "twospeed/io.hpp"
#include "twospeed/random.hpp"

namespace twospeed {

inline constexpr std::size_t kChipSide = 32;
inline constexpr std::size_t kChipChannels = 3;
inline constexpr std::size_t kChipPixels = kChipSide * kChipSide;
inline constexpr std::size_t kChipBytes = kChipPixels * kChipChannels;

// Labeled 32x32 RGB chips. Pixels are interleaved HWC bytes, chip after chip.
struct ChipDataset {
  std::vector<std::uint8_t> images;
  std::vector<std::uint16_t> labels;
  std::vector<std::string> class_names;
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  std::size_t num_classes() const { return class_names.size(); }

  std::span<const std::uint8_t> chip(std::size_t i) const {
    if ((i + 1) * kChipBytes > images.size()) throw RangeError("chip " + std::to_string(i) + " is past the image block");
    return std::span<const std::uint8_t>(images).subspan(i * kChipBytes, kChipBytes);
  }

  void validate() const {
    if (images.size() != labels.size() * kChipBytes)
      throw LoadError("image block holds " + std::to_string(images.size()) + " bytes, expected " +
                      std::to_string(labels.size() * kChipBytes));
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i] >= class_names.size())
        throw LoadError("label " + std::to_string(labels[i]) + " at index " + std::to_string(i) +
                        " is not below class count " + std::to_string(class_names.size()));
  }

  bool operator==(const ChipDataset&) const = default;
};

inline constexpr int kManifestVersion = 1;

// Writes <dir>/manifest.json, <dir>/labels.u16 and <dir>/images.u8.
inline void write_dataset(const ChipDataset& ds, const std::filesystem::path& dir) {
  ds.validate();
  io::ByteWriter labels;
  for (auto l : ds.labels) labels.put_uint(l);
  io::write_file_atomic(dir / "labels.u16", labels.bytes());
  io::write_file_atomic(dir / "images.u8", ds.images);
  nlohmann::ordered_json m;
  m["format_version"] = kManifestVersion;
  m["n"] = ds.size();
  m["width"] = kChipSide;
  m["height"] = kChipSide;
  m["channels"] = kChipChannels;
  m["class_names"] = ds.class_names;
  m["labels_file"] = "labels.u16";
  m["images_file"] = "images.u8";
  m["provenance"] = ds.provenance;
  io::write_file_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

// Accepts either the manifest path or the directory holding manifest.json.
inline ChipDataset load_dataset(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const fs::path manifest = fs::is_directory(path) ? path / "manifest.json" : path;
  if (!fs::exists(manifest)) throw LoadError("manifest not found: " + manifest.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(io::read_text(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest " + manifest.string() + " is not valid JSON: " + e.what());
  }
  ChipDataset ds;
  std::size_t n = 0;
  std::string labels_file, images_file;
  try {
    if (m.at("format_version").get<int>() != kManifestVersion)
      throw LoadError("unsupported manifest format_version " + m.at("format_version").dump());
    n = m.at("n").get<std::size_t>();
    if (m.at("width").get<std::size_t>() != kChipSide || m.at("height").get<std::size_t>() != kChipSide ||
        m.at("channels").get<std::size_t>() != kChipChannels)
      throw LoadError("chips must be 32x32x3");
    ds.class_names = m.at("class_names").get<std::vector<std::string>>();
    labels_file = m.at("labels_file").get<std::string>();
    images_file = m.at("images_file").get<std::string>();
    ds.provenance = m.value("provenance", std::string{});
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("manifest field missing or mistyped: " + std::string(e.what()));
  }
  if (ds.class_names.empty()) throw LoadError("manifest lists no classes");
  const fs::path base = manifest.parent_path();
  auto label_bytes = io::read_file(base / labels_file);
  if (label_bytes.size() != 2 * n)
    throw LoadError("labels file holds " + std::to_string(label_bytes.size() / 2) + " labels, manifest says n=" +
                    std::to_string(n));
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    ds.labels[i] = std::uint16_t(label_bytes[2 * i] | (label_bytes[2 * i + 1] << 8));
  ds.images = io::read_file(base / images_file);
  if (ds.images.size() < n * kChipBytes)
    throw LoadError("images file truncated: " + std::to_string(ds.images.size()) + " bytes, expected " +
                    std::to_string(n * kChipBytes));
  if (ds.images.size() > n * kChipBytes)
    throw LoadError("images file holds " + std::to_string(ds.images.size()) + " bytes, more than n*3072 = " +
                    std::to_string(n * kChipBytes));
  ds.validate();
  return ds;
}

// ---------------------------------------------------------------------------
// Splits and increments

struct SplitPlan {
  std::uint64_t seed = 0;
  double holdout_fraction = 0.2;
  double val_fraction = 0.1;
  std::vector<double> increment_fractions{0.25, 0.5, 0.75, 1.0};
  std::vector<std::uint32_t> holdout_indices;
  std::vector<std::uint32_t> trainval_order;

  std::size_t num_increments() const { return increment_fractions.size(); }

  bool operator==(const SplitPlan&) const = default;
};

struct IncrementView {
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> val;
};

inline void validate_fractions(double holdout_fraction, double val_fraction, const std::vector<double>& increments) {
  auto open_unit = [](double f) { return std::isfinite(f) && f > 0.0 && f < 1.0; };
  if (!open_unit(holdout_fraction)) throw ParameterError("holdout_fraction must lie in (0,1)");
  if (!open_unit(val_fraction)) throw ParameterError("val_fraction must lie in (0,1)");
  if (increments.empty()) throw ParameterError("at least one increment fraction is required");
  for (std::size_t i = 0; i < increments.size(); ++i) {
    const double f = increments[i];
    if (!(std::isfinite(f) && f > 0.0 && f <= 1.0)) throw ParameterError("increment fractions must lie in (0,1]");
    if (i > 0 && !(f > increments[i - 1])) throw ParameterError("increment fractions must be strictly ascending");
  }
  if (increments.back() != 1.0) throw ParameterError("the last increment fraction must be 1.0");
}

inline SplitPlan make_split_plan(std::size_t n, std::uint64_t seed, double holdout_fraction = 0.2,
                                 double val_fraction = 0.1, std::vector<double> increments = {0.25, 0.5, 0.75, 1.0}) {
  validate_fractions(holdout_fraction, val_fraction, increments);
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  Rng rng(derive_seed(seed, 0x5EED));
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto n_holdout = std::size_t(std::llround(double(n) * holdout_fraction));
  SplitPlan plan;
  plan.seed = seed;
  plan.holdout_fraction = holdout_fraction;
  plan.val_fraction = val_fraction;
  plan.increment_fractions = std::move(increments);
  plan.holdout_indices.assign(perm.begin(), perm.begin() + std::ptrdiff_t(n_holdout));
  plan.trainval_order.assign(perm.begin() + std::ptrdiff_t(n_holdout), perm.end());
  return plan;
}

inline SplitPlan make_split_plan(const ChipDataset& ds, std::uint64_t seed, double holdout_fraction = 0.2,
                                 double val_fraction = 0.1, std::vector<double> increments = {0.25, 0.5, 0.75, 1.0}) {
  return make_split_plan(ds.size(), seed, holdout_fraction, val_fraction, std::move(increments));
}

// Number of trainval samples covered by increment k (0-based).
inline std::size_t increment_size(const SplitPlan& plan, std::size_t k) {
  if (k >= plan.num_increments())
    throw RangeError("increment " + std::to_string(k) + " out of range (plan has " +
                     std::to_string(plan.num_increments()) + ")");
  const double total = double(plan.trainval_order.size());
  if (plan.increment_fractions[k] == 1.0) return plan.trainval_order.size();
  return std::size_t(std::floor(plan.increment_fractions[k] * total));
}

// Each increment appends a new chunk of trainval_order; the last val_fraction
// of every chunk is validation. Roles never change once assigned, so both the
// train and the val sets are nested across increments.
inline IncrementView increment_view(const SplitPlan& plan, std::size_t k) {
  increment_size(plan, k);
  IncrementView view;
  std::size_t begin = 0;
  for (std::size_t j = 0; j <= k; ++j) {
    const std::size_t end = increment_size(plan, j);
    const std::size_t chunk = end - begin;
    const auto n_val = std::size_t(std::llround(double(chunk) * plan.val_fraction));
    const std::size_t split = end - n_val;
    view.train.insert(view.train.end(), plan.trainval_order.begin() + std::ptrdiff_t(begin),
                      plan.trainval_order.begin() + std::ptrdiff_t(split));
    view.val.insert(view.val.end(), plan.trainval_order.begin() + std::ptrdiff_t(split),
                    plan.trainval_order.begin() + std::ptrdiff_t(end));
    begin = end;
  }
  return view;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentPolicy {
  double flip_lr = 0.5;
  double flip_ud = 0.5;
  double brightness_delta_max = 25.0;  // pixel units
  std::array<double, 2> contrast_range{0.8, 1.2};
  std::array<double, 2> saturation_range{0.7, 1.3};

  static AugmentPolicy identity() {
    return AugmentPolicy{0.0, 0.0, 0.0, {1.0, 1.0}, {1.0, 1.0}};
  }

  void validate() const {
    auto prob = [](double p) { return std::isfinite(p) && p >= 0.0 && p <= 1.0; };
    auto range = [](const std::array<double, 2>& r) {
      return std::isfinite(r[0]) && std::isfinite(r[1]) && r[0] >= 0.0 && r[0] <= 1.0 && r[1] >= 1.0;
    };
    if (!prob(flip_lr) || !prob(flip_ud)) throw ParameterError("flip probabilities must lie in [0,1]");
    if (!(std::isfinite(brightness_delta_max) && brightness_delta_max >= 0.0))
      throw ParameterError("brightness_delta_max must be nonnegative");
    if (!range(contrast_range)) throw ParameterError("contrast_range must contain 1.0");
    if (!range(saturation_range)) throw ParameterError("saturation_range must contain 1.0");
  }
};

inline void flip_lr(std::span<std::uint8_t> chip) {
  for (std::size_t y = 0; y < kChipSide; ++y)
    for (std::size_t x = 0; x < kChipSide / 2; ++x)
      for (std::size_t c = 0; c < kChipChannels; ++c)
        std::swap(chip[(y * kChipSide + x) * 3 + c], chip[(y * kChipSide + kChipSide - 1 - x) * 3 + c]);
}

inline void flip_ud(std::span<std::uint8_t> chip) {
  for (std::size_t y = 0; y < kChipSide / 2; ++y)
    for (std::size_t i = 0; i < kChipSide * 3; ++i)
      std::swap(chip[y * kChipSide * 3 + i], chip[(kChipSide - 1 - y) * kChipSide * 3 + i]);
}

struct AugmentDraw {
  bool flip_lr = false;
  bool flip_ud = false;
  double brightness = 0.0;
  double contrast = 1.0;
  double saturation = 1.0;
};

inline AugmentDraw draw_augment(const AugmentPolicy& p, Rng& rng) {
  AugmentDraw d;
  d.flip_lr = uniform(rng, 0.0, 1.0) < p.flip_lr;
  d.flip_ud = uniform(rng, 0.0, 1.0) < p.flip_ud;
  d.brightness = uniform(rng, -p.brightness_delta_max, p.brightness_delta_max);
  d.contrast = uniform(rng, p.contrast_range[0], p.contrast_range[1]);
  d.saturation = uniform(rng, p.saturation_range[0], p.saturation_range[1]);
  return d;
}

inline void apply_augment(std::span<std::uint8_t> chip, const AugmentDraw& d) {
  if (d.flip_lr) flip_lr(chip);
  if (d.flip_ud) flip_ud(chip);
  auto clamp = [](double v) { return std::clamp(v, 0.0, 255.0); };
  std::array<double, kChipBytes> px;
  for (std::size_t i = 0; i < kChipBytes; ++i) px[i] = clamp(double(chip[i]) + d.brightness);
  std::array<double, 3> mean{0, 0, 0};
  for (std::size_t i = 0; i < kChipBytes; ++i) mean[i % 3] += px[i];
  for (auto& m : mean) m /= double(kChipPixels);
  for (std::size_t i = 0; i < kChipBytes; ++i) px[i] = clamp((px[i] - mean[i % 3]) * d.contrast + mean[i % 3]);
  for (std::size_t p = 0; p < kChipPixels; ++p) {
    double* rgb = &px[p * 3];
    const double luma = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
    for (int c = 0; c < 3; ++c) rgb[c] = luma + d.saturation * (rgb[c] - luma);
  }
  for (std::size_t i = 0; i < kChipBytes; ++i) chip[i] = std::uint8_t(std::lround(clamp(px[i])));
}

// Augments `count` consecutive chips in place; each chip draws independently.
inline void augment_batch(std::span<std::uint8_t> images, const AugmentPolicy& policy, Rng& rng) {
  if (images.size() % kChipBytes != 0) throw ShapeError("image batch is not a whole number of chips");
  for (std::size_t off = 0; off < images.size(); off += kChipBytes) {
    const AugmentDraw d = draw_augment(policy, rng);
    apply_augment(images.subspan(off, kChipBytes), d);
  }
}

// ---------------------------------------------------------------------------
// Synthetic chips

enum class ClassKind { local_texture, long_range_stripes, blank };

struct ClassSpec {
  ClassKind kind = ClassKind::blank;
  double period = 0.0;       // texture: checker period (px); stripes: wavelength (px)
  double orientation = 0.0;  // stripes only, degrees; 0 = horizontal bands
  double noise = 0.0;        // per-pixel gaussian sigma
  double amplitude = 0.0;
  double phase_jitter = 0.0;  // stripes: phase drawn uniformly from +-jitter (radians)
  // Stripes: sigma of the random quadrature (sine) stripes added at every
  // multiple of 15 degrees. These fields are point-symmetric about the chip
  // centre, so they cancel against the class template over the whole chip
  // but not inside a small window.
  double nuisance = 0.0;
  std::string name;

  static ClassSpec texture(double period, double noise = 40.0) {
    ClassSpec s;
    s.kind = ClassKind::local_texture;
    s.period = period;
    s.noise = noise;
    s.amplitude = 40.0;
    s.name = "texture_p" + io::fixed(period, 0);
    return s;
  }
  static ClassSpec stripes(double orientation_deg, double period = 36.0, double noise = 12.0,
                           double nuisance = 35.0) {
    ClassSpec s;
    s.kind = ClassKind::long_range_stripes;
    s.orientation = orientation_deg;
    s.period = period;
    s.noise = noise;
    s.amplitude = 40.0;
    s.phase_jitter = 1.2;
    s.nuisance = nuisance;
    s.name = "stripes_" + io::fixed(orientation_deg, 0) + "deg";
    return s;
  }
  static ClassSpec blank(double noise = 0.0) {
    ClassSpec s;
    s.kind = ClassKind::blank;
    s.noise = noise;
    s.name = "blank";
    return s;
  }

  void validate() const {
    auto finite_nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!finite_nonneg(noise) || !finite_nonneg(amplitude) || !finite_nonneg(phase_jitter) ||
        !finite_nonneg(nuisance))
      throw ParameterError("class '" + name + "': noise, amplitude and jitter must be finite and nonnegative");
    if (!std::isfinite(orientation)) throw ParameterError("class '" + name + "': orientation must be finite");
    if (kind == ClassKind::local_texture) {
      const double tile = period / 2.0;
      if (!(period >= 2.0 && tile == std::floor(tile) && period <= double(kChipSide)))
        throw ParameterError("class '" + name + "': texture period must be an even integer in [2,32]");
    }
    if (kind == ClassKind::long_range_stripes && !(std::isfinite(period) && period > 0.0))
      throw ParameterError("class '" + name + "': stripe period must be positive");
  }
};

// Parses "texture:<period>[:<noise>]", "stripes:<deg>[:<period>[:<noise>[:<nuisance>]]]",
// "blank[:<noise>]" entries separated by commas, or the preset "default6".
inline std::vector<ClassSpec> parse_class_specs(const std::string& text) {
  if (text == "default6")
    return {ClassSpec::texture(2), ClassSpec::texture(4), ClassSpec::texture(6),
            ClassSpec::stripes(0), ClassSpec::stripes(30), ClassSpec::stripes(60)};
  std::vector<ClassSpec> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = std::min(text.find(',', start), text.size());
    const std::string entry = text.substr(start, comma - start);
    std::vector<std::string> parts;
    std::size_t p = 0;
    while (p <= entry.size()) {
      const std::size_t colon = std::min(entry.find(':', p), entry.size());
      parts.push_back(entry.substr(p, colon - p));
      p = colon + 1;
    }
    std::vector<double> nums;
    for (std::size_t i = 1; i < parts.size(); ++i) {
      try {
        std::size_t used = 0;
        nums.push_back(std::stod(parts[i], &used));
        if (used != parts[i].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParameterError("bad number '" + parts[i] + "' in class entry '" + entry + "'");
      }
    }
    ClassSpec s;
    if (parts[0] == "texture" && nums.size() >= 1 && nums.size() <= 2) {
      s = ClassSpec::texture(nums[0], nums.size() > 1 ? nums[1] : 40.0);
    } else if (parts[0] == "stripes" && nums.size() >= 1 && nums.size() <= 4) {
      s = ClassSpec::stripes(nums[0], nums.size() > 1 ? nums[1] : 36.0, nums.size() > 2 ? nums[2] : 12.0,
                             nums.size() > 3 ? nums[3] : 35.0);
    } else if (parts[0] == "blank" && nums.size() <= 1) {
      s = ClassSpec::blank(nums.empty() ? 0.0 : nums[0]);
    } else {
      throw ParameterError("unrecognized class entry '" + entry + "'");
    }
    s.validate();
    out.push_back(s);
    start = comma + 1;
  }
  return out;
}

inline double stripe_argument(double orientation_deg, double period, double x, double y) {
  const double theta = orientation_deg * std::numbers::pi / 180.0;
  const double c = (kChipSide - 1) / 2.0;
  const double proj = -(x - c) * std::sin(theta) + (y - c) * std::cos(theta);
  return 2.0 * std::numbers::pi * proj / period;
}

// Noise-free stripe argument at pixel (x, y) for a given phase.
inline double stripe_argument(const ClassSpec& spec, double x, double y, double phase) {
  return stripe_argument(spec.orientation, spec.period, x, y) + phase;
}

inline constexpr int kNuisanceOrientations = 12;

// Pixels where the noise-free stripe signal is at least half its amplitude
// away from mid-gray.
inline std::vector<bool> stripe_mask(const ClassSpec& spec, double phase) {
  std::vector<bool> mask(kChipPixels);
  for (std::size_t y = 0; y < kChipSide; ++y)
    for (std::size_t x = 0; x < kChipSide; ++x)
      mask[y * kChipSide + x] = std::abs(std::cos(stripe_argument(spec, double(x), double(y), phase))) >= 0.5;
  return mask;
}

struct SyntheticDataset {
  ChipDataset data;
  std::vector<ClassSpec> classes;
  std::vector<double> phases;  // per chip; stripes only, 0 otherwise
};

inline void render_chip(const ClassSpec& spec, Rng& rng, std::span<std::uint8_t> out, double& phase) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  phase = 0.0;
  std::size_t ox = 0, oy = 0;
  std::array<double, kNuisanceOrientations> nuisance{};
  if (spec.kind == ClassKind::local_texture) {
    const auto period = std::size_t(spec.period);
    ox = std::size_t(uniform(rng, 0.0, 1.0) * double(period)) % period;
    oy = std::size_t(uniform(rng, 0.0, 1.0) * double(period)) % period;
  } else if (spec.kind == ClassKind::long_range_stripes) {
    phase = uniform(rng, -spec.phase_jitter, spec.phase_jitter);
    for (auto& b : nuisance) b = spec.nuisance * gauss(rng);
  }
  for (std::size_t y = 0; y < kChipSide; ++y) {
    for (std::size_t x = 0; x < kChipSide; ++x) {
      double base = 128.0;
      if (spec.kind == ClassKind::local_texture) {
        const auto tile = std::size_t(spec.period) / 2;
        const bool on = (((x + ox) / tile) + ((y + oy) / tile)) % 2 == 0;
        base += on ? spec.amplitude : -spec.amplitude;
      } else if (spec.kind == ClassKind::long_range_stripes) {
        base += spec.amplitude * std::cos(stripe_argument(spec, double(x), double(y), phase));
        if (spec.nuisance > 0.0)
          for (int j = 0; j < kNuisanceOrientations; ++j)
            base += nuisance[j] * std::sin(stripe_argument(15.0 * j, spec.period, double(x), double(y)));
      }
      for (std::size_t c = 0; c < kChipChannels; ++c) {
        const double v = base + (spec.noise > 0.0 ? spec.noise * gauss(rng) : 0.0);
        out[(y * kChipSide + x) * 3 + c] = std::uint8_t(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
}

// Chips are emitted class by class in spec order. Each class draws from its
// own stream so that adding a class leaves the others unchanged.
inline SyntheticDataset generate_synthetic(const std::vector<ClassSpec>& classes, std::size_t per_class,
                                           std::uint64_t seed) {
  if (classes.size() < 2) throw ParameterError("at least two classes are required");
  if (per_class == 0) throw ParameterError("per-class count must be positive");
  if (classes.size() > 65535) throw ParameterError("too many classes");
  SyntheticDataset out;
  out.classes = classes;
  for (const auto& c : classes) {
    c.validate();
    if (std::count_if(classes.begin(), classes.end(), [&](const ClassSpec& o) { return o.name == c.name; }) > 1)
      throw ParameterError("duplicate class name '" + c.name + "'");
    out.data.class_names.push_back(c.name);
  }
  const std::size_t n = classes.size() * per_class;
  out.data.images.resize(n * kChipBytes);
  out.data.labels.resize(n);
  out.phases.resize(n);
  out.data.provenance = "synthetic seed=" + std::to_string(seed);
  for (std::size_t k = 0; k < classes.size(); ++k) {
    Rng rng(derive_seed(seed, k));
    for (std::size_t j = 0; j < per_class; ++j) {
      const std::size_t i = k * per_class + j;
      out.data.labels[i] = std::uint16_t(k);
      render_chip(classes[k], rng, std::span<std::uint8_t>(out.data.images).subspan(i * kChipBytes, kChipBytes),
                  out.phases[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (binary P6)

struct RgbImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // HWC
};

namespace detail {
inline std::size_t pnm_number(std::span<const std::uint8_t> b, std::size_t& pos, const std::string& what) {
  for (;;) {
    while (pos < b.size() && std::isspace(b[pos])) ++pos;
    if (pos < b.size() && b[pos] == '#') {
      while (pos < b.size() && b[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  std::size_t v = 0, digits = 0;
  while (pos < b.size() && std::isdigit(b[pos])) {
    v = v * 10 + std::size_t(b[pos++] - '0');
    if (++digits > 9) throw InputError(what + ": header number too large");
  }
  if (digits == 0) throw InputError(what + ": malformed header");
  return v;
}

inline RgbImage parse_pnm(std::span<const std::uint8_t> b, const std::string& what, char magic, std::size_t channels) {
  if (b.size() < 2 || b[0] != 'P' || b[1] != std::uint8_t(magic))
    throw InputError(what + ": not a binary P" + std::string(1, magic) + " file");
  std::size_t pos = 2;
  RgbImage img;
  img.width = pnm_number(b, pos, what);
  img.height = pnm_number(b, pos, what);
  const std::size_t maxval = pnm_number(b, pos, what);
  if (maxval != 255) throw InputError(what + ": maxval must be 255");
  if (pos >= b.size() || !std::isspace(b[pos])) throw InputError(what + ": malformed header");
  ++pos;
  const std::size_t need = img.width * img.height * channels;
  if (b.size() - pos < need) throw InputError(what + ": truncated pixel data");
  img.pixels.assign(b.begin() + std::ptrdiff_t(pos), b.begin() + std::ptrdiff_t(pos + need));
  return img;
}
}  // namespace detail

inline RgbImage read_ppm(const std::filesystem::path& path) {
  return detail::parse_pnm(io::read_file(path), path.string(), '6', 3);
}

inline void write_ppm(const std::filesystem::path& path, std::size_t width, std::size_t height,
                      std::span<const std::uint8_t> rgb) {
  if (rgb.size() != width * height * 3) throw ShapeError("PPM payload size does not match dimensions");
  std::string out = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(rgb.data()), rgb.size());
  io::write_file_atomic(path, out);
}

// Packs <src>/<class>/*.ppm into a dataset. Classes and files are taken in
// sorted name order.
inline ChipDataset import_ppm_tree(const std::filesystem::path& src) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(src)) throw InputError("source is not a directory: " + src.string());
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(src))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw InputError("no class subdirectories under " + src.string());
  ChipDataset ds;
  ds.provenance = "import " + src.filename().string();
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    ds.class_names.push_back(class_dirs[k].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[k]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      RgbImage img = read_ppm(f);
      if (img.width != kChipSide || img.height != kChipSide)
        throw InputError(f.string() + " is " + std::to_string(img.width) + "x" + std::to_string(img.height) +
                         ", expected 32x32");
      ds.images.insert(ds.images.end(), img.pixels.begin(), img.pixels.end());
      ds.labels.push_back(std::uint16_t(k));
    }
  }
  if (ds.labels.empty()) throw InputError("no .ppm files found under " + src.string());
  return ds;
}

}  // namespace twospeed
