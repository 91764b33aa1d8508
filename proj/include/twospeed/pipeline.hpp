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
#include <cstdint>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "twospeed/data.hpp"
#include "twospeed/ensemble.hpp"
#include "twospeed/errors.hpp"
#include "twospeed/io.hpp"
#include "twospeed/metrics.hpp"
#include "twospeed/scheduler.hpp"

namespace twospeed {

// One JSON document describes a whole run. Relative paths resolve against
// the directory holding the config file.
struct RunConfig {
  std::filesystem::path dataset;
  std::filesystem::path output_dir;
  std::uint64_t seed = 7;
  std::uint64_t split_seed = 7;
  double holdout_fraction = 0.2;
  double val_fraction = 0.1;
  TrainingSchedule schedule;
  std::array<double, 2> ensemble_weights{0.5, 0.5};  // fast, slow
  TimingMode timing = TimingMode::modeled;
  bool concurrent = true;
};

// The desk-scale defaults: mini HS-CNN for 15 epochs, tiny ViT for 40,
// both Adam 1e-3 with cosine decay.
inline TrainingSchedule default_schedule(std::size_t num_classes = 6) {
  TrainingSchedule s;
  s.fast_config = HsCnnConfig::mini(num_classes);
  s.slow_config = VitConfig::tiny(num_classes);
  s.fast_options.epochs = 15;
  s.fast_options.lr_schedule = LrSchedule::cosine;
  s.fast_options.weight_decay = 1e-4;
  s.slow_options.epochs = 40;
  s.slow_options.lr_schedule = LrSchedule::cosine;
  return s;
}

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!ok.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
}

template <typename T>
void read_opt(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

// Model objects start from a preset ("mini"/"reference" for hs_cnn,
// "tiny"/"reference" for vit) and override individual fields.
inline ModelConfig parse_model_config(const json& j, const std::string& where, std::size_t classes) {
  check_keys(j, where, {"kind", "preset", "block_filters", "dense_sizes", "dropout_rate", "l2_lambda", "num_classes",
                        "input_size", "image_size", "patch_size", "hidden_dim", "mlp_dim", "num_layers", "num_heads"});
  std::string kind, preset;
  read_opt(j, "kind", kind, where);
  read_opt(j, "preset", preset, where);
  read_opt(j, "num_classes", classes, where);
  auto reject = [&](std::initializer_list<const char*> keys) {
    for (const char* k : keys)
      if (j.contains(k)) throw ConfigError("key '" + std::string(k) + "' does not apply to " + kind + " in " + where);
  };
  if (kind == "hs_cnn") {
    reject({"image_size", "patch_size", "hidden_dim", "mlp_dim", "num_layers", "num_heads"});
    HsCnnConfig c;
    if (preset == "mini" || preset.empty())
      c = HsCnnConfig::mini(classes);
    else if (preset == "reference")
      c = HsCnnConfig::reference(classes);
    else
      throw ConfigError("unknown hs_cnn preset '" + preset + "' in " + where);
    read_opt(j, "block_filters", c.block_filters, where);
    read_opt(j, "dense_sizes", c.dense_sizes, where);
    read_opt(j, "dropout_rate", c.dropout_rate, where);
    read_opt(j, "l2_lambda", c.l2_lambda, where);
    read_opt(j, "input_size", c.input_size, where);
    return c;
  }
  if (kind == "vit") {
    reject({"block_filters", "dense_sizes", "l2_lambda", "input_size"});
    VitConfig c;
    if (preset == "tiny" || preset.empty())
      c = VitConfig::tiny(classes);
    else if (preset == "reference")
      c = VitConfig::reference(classes);
    else
      throw ConfigError("unknown vit preset '" + preset + "' in " + where);
    read_opt(j, "image_size", c.image_size, where);
    read_opt(j, "patch_size", c.patch_size, where);
    read_opt(j, "hidden_dim", c.hidden_dim, where);
    read_opt(j, "mlp_dim", c.mlp_dim, where);
    read_opt(j, "num_layers", c.num_layers, where);
    read_opt(j, "num_heads", c.num_heads, where);
    read_opt(j, "dropout_rate", c.dropout_rate, where);
    return c;
  }
  throw ConfigError(where + ".kind must be \"hs_cnn\" or \"vit\"");
}

inline void parse_model_section(const json& j, const std::string& where, std::size_t classes, ModelConfig& config,
                                TrainOptions& options) {
  check_keys(j, where, {"model", "epochs", "learning_rate", "lr_schedule", "batch_size", "weight_decay"});
  if (j.contains("model")) config = parse_model_config(j.at("model"), where + ".model", classes);
  read_opt(j, "epochs", options.epochs, where);
  read_opt(j, "learning_rate", options.learning_rate, where);
  read_opt(j, "batch_size", options.batch_size, where);
  read_opt(j, "weight_decay", options.weight_decay, where);
  if (j.contains("lr_schedule")) {
    std::string s;
    read_opt(j, "lr_schedule", s, where);
    if (s == "constant")
      options.lr_schedule = LrSchedule::constant;
    else if (s == "cosine")
      options.lr_schedule = LrSchedule::cosine;
    else
      throw ConfigError(where + ".lr_schedule must be \"constant\" or \"cosine\"");
  }
}

inline void parse_augment(const json& j, TrainOptions& fast, TrainOptions& slow) {
  if (j.is_boolean()) {
    fast.augment = slow.augment = j.get<bool>();
    return;
  }
  check_keys(j, "augment", {"enabled", "flip_lr", "flip_ud", "brightness_delta_max", "contrast_range",
                            "saturation_range"});
  bool enabled = true;
  AugmentPolicy p;
  read_opt(j, "enabled", enabled, "augment");
  read_opt(j, "flip_lr", p.flip_lr, "augment");
  read_opt(j, "flip_ud", p.flip_ud, "augment");
  read_opt(j, "brightness_delta_max", p.brightness_delta_max, "augment");
  read_opt(j, "contrast_range", p.contrast_range, "augment");
  read_opt(j, "saturation_range", p.saturation_range, "augment");
  fast.augment = slow.augment = enabled;
  fast.policy = slow.policy = p;
}

}  // namespace detail

// Parses a run config. num_classes defaults to `classes` for models that do
// not set it; paths resolve against base_dir.
inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir,
                                  std::size_t classes = 6) {
  using detail::read_opt;
  detail::check_keys(j, "config", {"dataset", "output_dir", "seed", "split", "slow_cadence", "fast", "slow", "augment",
                                   "ensemble_weights", "timing", "concurrent"});
  if (!j.contains("dataset") || !j.contains("output_dir"))
    throw ConfigError("config needs both \"dataset\" and \"output_dir\"");
  if (!j.contains("seed")) throw ConfigError("config needs an explicit \"seed\"");
  RunConfig c;
  c.schedule = default_schedule(classes);
  std::string dataset, output;
  read_opt(j, "dataset", dataset, "config");
  read_opt(j, "output_dir", output, "config");
  if (dataset.empty() || output.empty()) throw ConfigError("dataset and output_dir must be non-empty");
  c.dataset = base_dir / dataset;
  c.output_dir = base_dir / output;
  read_opt(j, "seed", c.seed, "config");
  c.split_seed = c.seed;
  if (j.contains("split")) {
    const auto& s = j.at("split");
    detail::check_keys(s, "split", {"seed", "holdout_fraction", "val_fraction", "increments", "labels"});
    read_opt(s, "seed", c.split_seed, "split");
    read_opt(s, "holdout_fraction", c.holdout_fraction, "split");
    read_opt(s, "val_fraction", c.val_fraction, "split");
    std::vector<double> fr;
    std::vector<std::string> labels;
    read_opt(s, "increments", fr, "split");
    read_opt(s, "labels", labels, "split");
    if (!fr.empty() || !labels.empty()) {
      if (fr.empty()) fr = c.schedule.fractions();
      if (labels.empty())
        for (std::size_t i = 0; i < fr.size(); ++i) labels.push_back("T" + std::to_string(i + 1));
      if (labels.size() != fr.size()) throw ConfigError("split.labels and split.increments differ in length");
      c.schedule.increments.clear();
      for (std::size_t i = 0; i < fr.size(); ++i) c.schedule.increments.push_back({labels[i], fr[i]});
    }
  }
  read_opt(j, "slow_cadence", c.schedule.slow_cadence, "config");
  if (j.contains("fast")) detail::parse_model_section(j.at("fast"), "fast", classes, c.schedule.fast_config, c.schedule.fast_options);
  if (j.contains("slow")) detail::parse_model_section(j.at("slow"), "slow", classes, c.schedule.slow_config, c.schedule.slow_options);
  if (j.contains("augment")) detail::parse_augment(j.at("augment"), c.schedule.fast_options, c.schedule.slow_options);
  if (j.contains("ensemble_weights")) {
    std::vector<double> w;
    read_opt(j, "ensemble_weights", w, "config");
    if (w.size() != 2) throw ConfigError("ensemble_weights must hold [fast, slow]");
    c.ensemble_weights = {w[0], w[1]};
  }
  if (j.contains("timing")) {
    std::string t;
    read_opt(j, "timing", t, "config");
    if (t == "wall")
      c.timing = TimingMode::wall;
    else if (t == "modeled")
      c.timing = TimingMode::modeled;
    else
      throw ConfigError("timing must be \"wall\" or \"modeled\"");
  }
  read_opt(j, "concurrent", c.concurrent, "config");

  c.schedule.validate();
  if (kind_of(c.schedule.fast_config) != ModelKind::hs_cnn) throw ConfigError("the fast model must be an hs_cnn");
  if (kind_of(c.schedule.slow_config) != ModelKind::vit) throw ConfigError("the slow model must be a vit");
  try {
    validate_fractions(c.holdout_fraction, c.val_fraction, c.schedule.fractions());
    c.schedule.fast_options.policy.validate();
    detail::check_weight(c.ensemble_weights[0]);
    detail::check_weight(c.ensemble_weights[1]);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// The default run written out in full, so a config file is self-describing.
inline nlohmann::ordered_json default_run_config_json(const std::string& dataset, const std::string& output_dir,
                                                      std::uint64_t seed = 7) {
  nlohmann::ordered_json j;
  j["dataset"] = dataset;
  j["output_dir"] = output_dir;
  j["seed"] = seed;
  j["split"] = {{"seed", seed},
                {"holdout_fraction", 0.2},
                {"val_fraction", 0.1},
                {"increments", {0.25, 0.5, 0.75, 1.0}},
                {"labels", {"T1", "T2", "T3", "T4"}}};
  j["slow_cadence"] = 2;
  j["fast"] = {{"model", {{"kind", "hs_cnn"}, {"preset", "mini"}}},
               {"epochs", 15},
               {"learning_rate", 1e-3},
               {"lr_schedule", "cosine"},
               {"batch_size", 64},
               {"weight_decay", 1e-4}};
  j["slow"] = {{"model", {{"kind", "vit"}, {"preset", "tiny"}}},
               {"epochs", 40},
               {"learning_rate", 1e-3},
               {"lr_schedule", "cosine"},
               {"batch_size", 64},
               {"weight_decay", 0.0}};
  j["augment"] = {{"enabled", true}};
  j["ensemble_weights"] = {0.5, 0.5};
  j["timing"] = "modeled";
  j["concurrent"] = true;
  return j;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

// Fails before any training when the dataset is missing or does not match
// the model configs.
inline ChipDataset load_run_dataset(const RunConfig& c) {
  namespace fs = std::filesystem;
  const fs::path manifest = fs::is_directory(c.dataset) ? c.dataset / "manifest.json" : c.dataset;
  if (!fs::exists(manifest)) throw ConfigError("dataset not found: " + c.dataset.string());
  auto ds = load_dataset(c.dataset);
  if (ds.num_classes() != num_classes_of(c.schedule.fast_config))
    throw ConfigError("dataset has " + std::to_string(ds.num_classes()) + " classes, models expect " +
                      std::to_string(num_classes_of(c.schedule.fast_config)));
  return ds;
}

inline SplitPlan run_split(const RunConfig& c, const ChipDataset& ds) {
  return make_split_plan(ds, c.split_seed, c.holdout_fraction, c.val_fraction, c.schedule.fractions());
}

struct EvaluationResult {
  MetricsReport report;
  ConfusionMatrix confusion;
};

inline EvaluationResult evaluate_ensemble(const ActiveEnsemble& active, const ChipDataset& ds,
                                          std::span<const std::uint32_t> indices, const std::string& increment,
                                          double training_total_seconds) {
  const auto pred = ensemble_predict(active.spec, ds, indices);
  std::vector<int> truth;
  for (auto i : indices) truth.push_back(ds.labels[i]);
  auto cm = confusion_matrix(truth, pred.classes, ds.num_classes(), ds.class_names);
  auto r = make_report(cm, active.label(), increment);
  r.train_fraction_fast = active.fast.data_fraction;
  if (active.slow) r.train_fraction_slow = active.slow->data_fraction;
  r.training_total_seconds = training_total_seconds;
  return {std::move(r), std::move(cm)};
}

namespace detail {

// Increment labels already present in <dir>/metrics.csv.
inline std::set<std::string> reported_increments(const std::filesystem::path& metrics) {
  std::set<std::string> out;
  if (!std::filesystem::exists(metrics)) return out;
  std::istringstream in(io::read_text(metrics));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    const auto a = line.find(',');
    if (a == std::string::npos) continue;
    const auto b = line.find(',', a + 1);
    out.insert(line.substr(a + 1, b - a - 1));
  }
  return out;
}

}  // namespace detail

struct ScheduleProgress {
  std::size_t increment = 0;
  std::string label;
  std::vector<LedgerRow> ledger;
  std::optional<MetricsReport> report;  // absent when the row already existed
};

// Runs every increment not yet in <output_dir>/registry, evaluates the live
// ensemble on the full holdout after each one and writes metrics.csv,
// confusion_<label>.csv and ledger.csv. Rerunning a finished directory
// changes nothing.
inline std::vector<MetricsReport> run_schedule(const RunConfig& c, const Trainer& trainer,
                                               const std::function<void(const ScheduleProgress&)>& progress = {}) {
  namespace fs = std::filesystem;
  const auto ds = load_run_dataset(c);
  const auto split = run_split(c, ds);
  try {
    fs::create_directories(c.output_dir / "registry" / "models");
  } catch (const fs::filesystem_error& e) {
    throw IoError(e.what());
  }
  ModelRegistry reg(c.output_dir / "registry");
  const auto& s = c.schedule;
  const auto metrics_path = c.output_dir / "metrics.csv";
  auto reported = detail::reported_increments(metrics_path);
  std::vector<MetricsReport> out;
  std::string ledger;
  for (std::size_t k = 0; k < s.increments.size(); ++k) {
    const auto& label = s.increments[k].label;
    ScheduleProgress p{k, label, {}, std::nullopt};
    if (completed_increments(reg, s) <= k)
      p.ledger = run_increment(reg, s, k, ds, split, trainer, {c.seed, c.concurrent});
    else
      p.ledger = ledger_rows(reg, s, k);
    ledger += ledger_csv(p.ledger);
    if (!reported.count(label)) {
      const auto active = active_ensemble_at(reg, k, c.ensemble_weights[0], c.ensemble_weights[1]);
      auto ev = evaluate_ensemble(active, ds, split.holdout_indices, label, p.ledger.front().ensemble_total_seconds);
      emit_report(ev.report, ev.confusion, c.output_dir, ev.report.model);
      reported.insert(label);
      p.report = ev.report;
      out.push_back(ev.report);
    }
    io::write_file_atomic(c.output_dir / "ledger.csv", std::string(kLedgerHeader) + ledger);
    if (progress) progress(p);
  }
  return out;
}

}  // namespace twospeed
