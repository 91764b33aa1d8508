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
// twospeed: synth, import, schedule, eval, sweep, saliency.
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "twospeed/data.hpp"
#include "twospeed/ensemble.hpp"
#include "twospeed/errors.hpp"
#include "twospeed/metrics.hpp"
#include "twospeed/pipeline.hpp"
#include "twospeed/saliency.hpp"
#include "twospeed/scheduler.hpp"
#include "twospeed/serialize.hpp"

namespace fs = std::filesystem;
using namespace twospeed;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

// Where evaluation chips come from: a dataset plus a split, or a run config
// that names both.
struct DataFlags {
  std::string data;
  std::string config;
  std::string split = "holdout";
  std::uint64_t split_seed = 7;
  double holdout_fraction = 0.2;

  void add(CLI::App* cmd) {
    cmd->add_option("--data", data, "Dataset directory or manifest");
    cmd->add_option("--config", config, "Run config; supplies dataset and split");
    cmd->add_option("--split", split, "holdout | trainval | all")->check(CLI::IsMember({"holdout", "trainval", "all"}));
    cmd->add_option("--split-seed", split_seed, "Split seed when no config is given");
    cmd->add_option("--holdout-fraction", holdout_fraction, "Holdout fraction when no config is given");
  }

  struct Loaded {
    ChipDataset ds;
    SplitPlan plan;
    std::vector<std::uint32_t> indices;
  };

  Loaded load() const {
    if (data.empty() == config.empty()) throw UsageError("give exactly one of --data or --config");
    Loaded out;
    if (!config.empty()) {
      auto rc = load_run_config(config);
      out.ds = load_run_dataset(rc);
      out.plan = run_split(rc, out.ds);
    } else {
      out.ds = load_dataset(data);
      out.plan = make_split_plan(out.ds, split_seed, holdout_fraction);
    }
    if (split == "holdout") {
      out.indices = out.plan.holdout_indices;
    } else if (split == "trainval") {
      out.indices = out.plan.trainval_order;
    } else {
      out.indices.resize(out.ds.size());
      for (std::size_t i = 0; i < out.ds.size(); ++i) out.indices[i] = std::uint32_t(i);
    }
    return out;
  }
};

// Any failure to read a model file is a runtime (exit 1) failure.
std::shared_ptr<const Model<float>> load_model_arg(const std::string& path) {
  try {
    return std::make_shared<const Model<float>>(load_model_file<float>(path));
  } catch (const LoadError&) {
    throw;
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    throw LoadError(path + ": " + e.what());
  }
}

int cmd_synth(const std::string& out, std::uint64_t seed, std::size_t per_class, const std::string& classes) {
  const auto specs = parse_class_specs(classes);
  const auto syn = generate_synthetic(specs, per_class, seed);
  fs::create_directories(out);
  write_dataset(syn.data, out);
  std::cout << "wrote " << syn.data.size() << " chips (" << per_class << " per class, " << specs.size()
            << " classes) to " << out << "\n";
  return 0;
}

int cmd_import(const std::string& src, const std::string& out) {
  const auto ds = import_ppm_tree(src);
  fs::create_directories(out);
  write_dataset(ds, out);
  std::cout << "imported " << ds.size() << " chips in " << ds.num_classes() << " classes to " << out << "\n";
  return 0;
}

int cmd_schedule(const std::string& config, const std::string& write_default) {
  if (!write_default.empty()) {
    io::write_file_atomic(write_default, default_run_config_json("data", "run").dump(2) + "\n");
    std::cout << "wrote default config to " << write_default << "\n";
    return 0;
  }
  if (config.empty()) throw UsageError("schedule needs --config (or --write-default)");
  const auto rc = load_run_config(config);
  run_schedule(rc, default_trainer(rc.timing), [](const ScheduleProgress& p) {
    const auto& total = p.ledger.front().ensemble_total_seconds;
    std::cout << p.label << ": ";
    if (p.report)
      std::cout << p.report->model << " holdout OA " << io::fixed(p.report->oa, 4);
    else
      std::cout << "already reported";
    std::cout << ", ensemble training total " << io::fixed(total, 1) << " s\n";
  });
  std::cout << "outputs in " << rc.output_dir << "\n";
  return 0;
}

int cmd_eval(const DataFlags& df, const std::string& model, const std::string& fast, const std::string& slow,
             std::vector<double> weights, const std::string& out, std::string id) {
  const bool single = !model.empty();
  if (single == (!fast.empty() || !slow.empty())) throw UsageError("give either --model or --fast with --slow");
  if (!single && (fast.empty() || slow.empty())) throw UsageError("an ensemble needs both --fast and --slow");
  if (weights.size() != 2) throw UsageError("--weights takes two values");
  const auto loaded = df.load();
  ActiveEnsemble active;
  if (single) {
    active.fast.id = fs::path(model).stem().string();
    active.spec.components.push_back({active.fast.id, load_model_arg(model), 1.0});
  } else {
    active.fast.id = fs::path(fast).stem().string();
    ModelSnapshot s;
    s.id = fs::path(slow).stem().string();
    active.slow = s;
    active.spec.components.push_back({active.fast.id, load_model_arg(fast), weights[0]});
    active.spec.components.push_back({s.id, load_model_arg(slow), weights[1]});
  }
  active.spec.validate();
  if (id.empty()) id = single ? active.fast.id : active.fast.id + "+" + active.slow->id;
  auto ev = evaluate_ensemble(active, loaded.ds, loaded.indices, df.split, 0.0);
  ev.report.model = id;
  ev.report.train_fraction_slow.reset();
  fs::create_directories(out);
  emit_report(ev.report, ev.confusion, out, id);
  std::cout << id << " on " << df.split << " (" << ev.report.n_eval << " chips): OA " << io::fixed(ev.report.oa, 4)
            << ", macro F1 " << io::fixed(ev.report.macro_f1, 4) << "\n";
  return 0;
}

int cmd_sweep(const DataFlags& df, const std::string& fast, const std::string& slow, const std::string& out) {
  const auto a = load_model_arg(fast);
  const auto b = load_model_arg(slow);
  const auto loaded = df.load();
  const auto result = weight_sweep(*a, *b, loaded.ds, loaded.indices);
  if (!out.empty())
    write_sweep_csv(result, out);
  else
    std::cout << sweep_csv(result);
  const auto& best = result.best_row();
  std::cout << "best " << io::fixed(best.w_a, 1) << ":" << io::fixed(best.w_b, 1) << " OA "
            << io::fixed(best.overall_accuracy) << "\n";
  return 0;
}

int cmd_saliency(const DataFlags& df, const std::string& model_path, std::size_t index, std::optional<int> target,
                 const std::string& method_name, const std::string& out) {
  const auto method = parse_saliency_method(method_name);
  const auto model = load_model_arg(model_path);
  if (method == SaliencyMethod::attention_rollout && model->kind() != ModelKind::vit)
    throw KindError("attention rollout needs a vit model, got " + to_string(model->kind()));
  const auto loaded = df.load();
  const auto& ds = loaded.ds;
  if (index >= ds.size())
    throw RangeError("chip index " + std::to_string(index) + " out of range (dataset has " + std::to_string(ds.size()) + ")");
  if (ds.num_classes() != model->num_classes()) throw InputError("model and dataset disagree on the number of classes");
  const std::vector<std::uint32_t> one{std::uint32_t(index)};
  const auto probs = predict_probabilities(*model, ds, one);
  const std::size_t cls = target ? std::size_t(*target) : std::size_t(argmax_rows(probs).front());
  if (target && (*target < 0 || cls >= ds.num_classes())) throw InputError("--class out of range");
  const auto chip = ds.chip(index);

  SaliencyMap map;
  if (method == SaliencyMethod::occlusion) {
    OcclusionOptions opt;
    opt.baseline = mean_color(ds, loaded.plan.trainval_order);
    map = occlusion_map(*model, chip, cls, opt);
  } else {
    map = attention_rollout(*model, chip, cls);
  }
  const fs::path prefix(out);
  if (prefix.has_parent_path()) fs::create_directories(prefix.parent_path());
  write_map_image(map, prefix.string() + ".pgm");
  write_montage(chip, map, prefix.string() + "_montage.ppm");
  std::cout << "chip " << index << " (true " << ds.class_names[ds.labels[index]] << "): " << to_string(method)
            << " for class " << ds.class_names[cls] << ", probability " << io::fixed(probs.row(0)[cls], 4) << "\n";
  return 0;
}

int exit_code_for(const Error& e) {
  if (dynamic_cast<const UsageError*>(&e) || dynamic_cast<const ConfigError*>(&e) ||
      dynamic_cast<const ParameterError*>(&e) || dynamic_cast<const InputError*>(&e) ||
      dynamic_cast<const RangeError*>(&e) || dynamic_cast<const KindError*>(&e))
    return kExitUsage;
  return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-speed CNN/ViT ensemble on 32x32 RGB chips"};
  app.require_subcommand(1);

  std::string synth_out, classes = "default6";
  std::uint64_t synth_seed = 7;
  std::size_t per_class = 500;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic texture/stripe dataset");
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Generator seed");
  synth->add_option("--per-class", per_class, "Chips per class");
  synth->add_option("--classes", classes, "default6 or a list like texture:4,stripes:30");

  std::string import_src, import_out;
  auto* imp = app.add_subcommand("import", "Pack <src>/<class>/*.ppm 32x32 chips into a dataset");
  imp->add_option("--src", import_src, "Source directory")->required();
  imp->add_option("--out", import_out, "Output directory")->required();

  std::string sched_config, write_default;
  auto* sched = app.add_subcommand("schedule", "Run the staggered two-speed training schedule");
  sched->add_option("--config", sched_config, "Run config (JSON)");
  sched->add_option("--write-default", write_default, "Write the default run config here and exit");

  DataFlags eval_data;
  std::string eval_model, eval_fast, eval_slow, eval_out = ".", eval_id;
  std::vector<double> eval_weights{0.5, 0.5};
  auto* eval = app.add_subcommand("eval", "Evaluate a model or a fast+slow ensemble");
  eval_data.add(eval);
  eval->add_option("--model", eval_model, "Single model file");
  eval->add_option("--fast", eval_fast, "Fast (HS-CNN) model file");
  eval->add_option("--slow", eval_slow, "Slow (ViT) model file");
  eval->add_option("--weights", eval_weights, "Fast and slow weights")->expected(2)->delimiter(',');
  eval->add_option("--out", eval_out, "Directory for metrics.csv and confusion CSV");
  eval->add_option("--id", eval_id, "Row label (default: model file stem)");

  DataFlags sweep_data;
  std::string sweep_fast, sweep_slow, sweep_out;
  auto* sweep = app.add_subcommand("sweep", "Evaluate weights 10:90 through 90:10");
  sweep_data.add(sweep);
  sweep->add_option("--fast", sweep_fast, "Fast (HS-CNN) model file")->required();
  sweep->add_option("--slow", sweep_slow, "Slow (ViT) model file")->required();
  sweep->add_option("--out", sweep_out, "CSV path (default: stdout)");

  DataFlags sal_data;
  sal_data.split = "all";
  std::string sal_model, sal_method = "occlusion", sal_out = "saliency";
  std::size_t sal_index = 0;
  std::optional<int> sal_class;
  auto* sal = app.add_subcommand("saliency", "Write a saliency map and montage for one chip");
  sal_data.add(sal);
  sal->add_option("--model", sal_model, "Model file")->required();
  sal->add_option("--index", sal_index, "Chip index in the dataset")->required();
  sal->add_option("--class", sal_class, "Class to attribute (default: predicted)");
  sal->add_option("--method", sal_method, "occlusion | attention_rollout");
  sal->add_option("--out", sal_out, "Output prefix for <prefix>.pgm and <prefix>_montage.ppm");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*synth) return cmd_synth(synth_out, synth_seed, per_class, classes);
    if (*imp) return cmd_import(import_src, import_out);
    if (*sched) return cmd_schedule(sched_config, write_default);
    if (*eval) return cmd_eval(eval_data, eval_model, eval_fast, eval_slow, eval_weights, eval_out, eval_id);
    if (*sweep) return cmd_sweep(sweep_data, sweep_fast, sweep_slow, sweep_out);
    if (*sal) return cmd_saliency(sal_data, sal_model, sal_index, sal_class, sal_method, sal_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
