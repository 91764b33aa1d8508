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

#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "twospeed/ensemble.hpp"
#include "twospeed/io.hpp"
#include "twospeed/serialize.hpp"
#include "twospeed/train.hpp"

namespace twospeed {

enum class Speed : std::uint8_t { fast, slow };

inline const char* to_string(Speed s) { return s == Speed::fast ? "fast" : "slow"; }

inline Speed parse_speed(const std::string& s) {
  if (s == "fast") return Speed::fast;
  if (s == "slow") return Speed::slow;
  throw InputError("unknown model speed '" + s + "'");
}

struct IncrementSpec {
  std::string label;
  double fraction = 1.0;
};

struct TrainingSchedule {
  std::vector<IncrementSpec> increments{{"T1", 0.25}, {"T2", 0.5}, {"T3", 0.75}, {"T4", 1.0}};
  std::size_t slow_cadence = 2;
  ModelConfig fast_config = HsCnnConfig::mini(6);
  ModelConfig slow_config = VitConfig::tiny(6);
  TrainOptions fast_options;
  TrainOptions slow_options;

  void validate() const {
    if (increments.empty()) throw ConfigError("schedule has no increments");
    if (slow_cadence < 1) throw ConfigError("slow cadence must be at least 1");
    double prev = 0.0;
    std::set<std::string> labels;
    for (const auto& inc : increments) {
      if (!(inc.fraction > prev)) throw ConfigError("increment fractions must be strictly increasing");
      if (inc.label.empty() || inc.label.find_first_of("\t\n,") != std::string::npos)
        throw ConfigError("increment label '" + inc.label + "' is empty or holds a separator");
      if (!labels.insert(inc.label).second) throw ConfigError("duplicate increment label " + inc.label);
      prev = inc.fraction;
    }
    if (increments.back().fraction != 1.0) throw ConfigError("last increment fraction must be 1.0");
    try {
      twospeed::validate(fast_config);
      twospeed::validate(slow_config);
      fast_options.validate();
      slow_options.validate();
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    if (num_classes_of(fast_config) != num_classes_of(slow_config))
      throw ConfigError("fast and slow models disagree on the number of classes");
  }

  std::vector<double> fractions() const {
    std::vector<double> f;
    for (const auto& i : increments) f.push_back(i.fraction);
    return f;
  }
};

struct PlannedAction {
  Speed speed = Speed::fast;
  double fraction = 0.0;
  bool operator==(const PlannedAction&) const = default;
};

struct PlannedIncrement {
  std::size_t index = 0;  // 0-based
  std::string label;
  double fraction = 0.0;
  std::vector<PlannedAction> actions;
};

// Fast trains every increment; slow on every s-th, counting from 1.
inline std::vector<PlannedIncrement> plan_schedule(const TrainingSchedule& s) {
  s.validate();
  std::vector<PlannedIncrement> plan;
  for (std::size_t k = 0; k < s.increments.size(); ++k) {
    PlannedIncrement p{k, s.increments[k].label, s.increments[k].fraction, {{Speed::fast, s.increments[k].fraction}}};
    if ((k + 1) % s.slow_cadence == 0) p.actions.push_back({Speed::slow, s.increments[k].fraction});
    plan.push_back(std::move(p));
  }
  return plan;
}

inline std::string snapshot_id(Speed speed, const std::string& increment_label) {
  return std::string(to_string(speed)) + "-" + increment_label;
}

struct ModelSnapshot {
  std::string id;
  Speed speed = Speed::fast;
  ModelKind model_kind = ModelKind::hs_cnn;
  std::size_t increment_index = 0;
  std::string increment_label;
  double data_fraction = 0.0;
  double duration_seconds = 0.0;
  std::optional<double> val_oa;
  std::string model_file;  // relative to the registry directory

  bool operator==(const ModelSnapshot&) const = default;
};

namespace detail {

inline constexpr const char* kRegistryHeader =
    "id\tspeed\tmodel\tincrement_index\tincrement\tdata_fraction\tduration_seconds\tval_oa\tfile\n";

inline std::string registry_line(const ModelSnapshot& s) {
  std::string line = s.id + "\t" + to_string(s.speed) + "\t" + to_string(s.model_kind) + "\t" +
                     std::to_string(s.increment_index) + "\t" + s.increment_label + "\t" + io::fixed(s.data_fraction) +
                     "\t" + io::fixed(s.duration_seconds) + "\t";
  if (s.val_oa) line += io::fixed(*s.val_oa);
  return line + "\t" + s.model_file + "\n";
}

inline double parse_real(const std::string& s, const std::string& what) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) throw LoadError("registry log: bad " + what + " '" + s + "'");
  return v;
}

inline ModelSnapshot parse_registry_line(const std::string& line) {
  std::vector<std::string> f;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, '\t')) f.push_back(cell);
  if (!line.empty() && line.back() == '\t') f.emplace_back();
  if (f.size() != 9) throw LoadError("registry log: expected 9 fields, found " + std::to_string(f.size()));
  ModelSnapshot s;
  s.id = f[0];
  try {
    s.speed = parse_speed(f[1]);
  } catch (const InputError& e) {
    throw LoadError(std::string("registry log: ") + e.what());
  }
  if (f[2] == "hs_cnn")
    s.model_kind = ModelKind::hs_cnn;
  else if (f[2] == "vit")
    s.model_kind = ModelKind::vit;
  else
    throw LoadError("registry log: unknown model kind '" + f[2] + "'");
  s.increment_index = std::size_t(parse_real(f[3], "increment index"));
  s.increment_label = f[4];
  s.data_fraction = parse_real(f[5], "data fraction");
  s.duration_seconds = parse_real(f[6], "duration");
  if (!f[7].empty()) s.val_oa = parse_real(f[7], "validation accuracy");
  s.model_file = f[8];
  return s;
}

}  // namespace detail

// Append-only snapshot store. With a directory, every registration writes
// models/<id>.tspd and then rewrites log.tsv by atomic rename; opening an
// existing directory replays the log. Without one it lives in memory.
class ModelRegistry {
 public:
  ModelRegistry() = default;

  explicit ModelRegistry(std::filesystem::path dir) : dir_(std::move(dir)) {
    const auto log = dir_ / "log.tsv";
    if (!std::filesystem::exists(log)) return;
    std::istringstream in(io::read_text(log));
    std::string line;
    if (!std::getline(in, line) || line + "\n" != detail::kRegistryHeader) throw LoadError("registry log: bad header");
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      auto s = detail::parse_registry_line(line);
      if (!std::filesystem::exists(dir_ / s.model_file)) throw LoadError("registry log names missing file " + s.model_file);
      insert(std::move(s), nullptr);
    }
  }

  const std::filesystem::path& directory() const { return dir_; }

  std::vector<ModelSnapshot> snapshots() const {
    std::lock_guard lock(mu_);
    return log_;
  }

  std::optional<ModelSnapshot> latest(Speed speed) const {
    std::lock_guard lock(mu_);
    const auto& p = speed == Speed::fast ? latest_fast_ : latest_slow_;
    if (!p) return std::nullopt;
    return log_[*p];
  }

  // Latest of each kind, read together under one lock.
  std::pair<std::optional<ModelSnapshot>, std::optional<ModelSnapshot>> latest_pair() const {
    std::lock_guard lock(mu_);
    return {latest_fast_ ? std::optional(log_[*latest_fast_]) : std::nullopt,
            latest_slow_ ? std::optional(log_[*latest_slow_]) : std::nullopt};
  }

  bool contains(const std::string& id) const {
    std::lock_guard lock(mu_);
    return index_.count(id) != 0;
  }

  // Latest of each kind among snapshots from increments 0..k.
  std::pair<std::optional<ModelSnapshot>, std::optional<ModelSnapshot>> active_at(std::size_t k) const {
    std::lock_guard lock(mu_);
    std::optional<ModelSnapshot> fast, slow;
    for (const auto& s : log_) {
      if (s.increment_index > k) continue;
      (s.speed == Speed::fast ? fast : slow) = s;
    }
    return {fast, slow};
  }

  // Persists the model file, then the log line. The in-memory state changes
  // only after both writes succeed.
  void register_snapshot(ModelSnapshot snap, std::shared_ptr<const Model<float>> model) {
    std::lock_guard write_lock(write_mu_);
    if (contains(snap.id)) throw StateError("snapshot id '" + snap.id + "' already registered");
    if (snap.id.empty() || snap.id.find_first_of("\t\n/") != std::string::npos)
      throw InputError("snapshot id '" + snap.id + "' is empty or holds a separator");
    if (!model) throw InputError("snapshot '" + snap.id + "' has no model");
    snap.model_kind = model->kind();
    snap.model_file = "models/" + snap.id + ".tspd";
    if (!dir_.empty()) {
      save_model_file(*model, dir_ / snap.model_file);
      io::append_atomic(dir_ / "log.tsv", detail::kRegistryHeader, detail::registry_line(snap));
    }
    std::lock_guard lock(mu_);
    insert(std::move(snap), std::move(model));
  }

  std::shared_ptr<const Model<float>> model(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = index_.find(id);
    if (it == index_.end()) throw StateError("no snapshot '" + id + "'");
    auto& cached = models_[it->second];
    if (!cached) cached = std::make_shared<const Model<float>>(load_model_file<float>(dir_ / log_[it->second].model_file));
    return cached;
  }

 private:
  void insert(ModelSnapshot s, std::shared_ptr<const Model<float>> m) {
    if (index_.count(s.id)) throw LoadError("duplicate snapshot id " + s.id);
    const std::size_t i = log_.size();
    index_[s.id] = i;
    (s.speed == Speed::fast ? latest_fast_ : latest_slow_) = i;
    log_.push_back(std::move(s));
    models_.push_back(std::move(m));
  }

  std::filesystem::path dir_;
  mutable std::mutex mu_;
  std::mutex write_mu_;
  std::vector<ModelSnapshot> log_;
  mutable std::vector<std::shared_ptr<const Model<float>>> models_;
  std::map<std::string, std::size_t> index_;
  std::optional<std::size_t> latest_fast_, latest_slow_;
};

// Number of leading increments whose planned actions are all registered.
inline std::size_t completed_increments(const ModelRegistry& reg, const TrainingSchedule& s) {
  std::size_t done = 0;
  for (const auto& inc : plan_schedule(s)) {
    for (const auto& a : inc.actions)
      if (!reg.contains(snapshot_id(a.speed, inc.label))) return done;
    ++done;
  }
  return done;
}

// Where a training action gets its data and randomness.
struct TrainJob {
  Speed speed = Speed::fast;
  std::size_t increment = 0;
  ModelConfig config;
  TrainOptions options;
  const ChipDataset* data = nullptr;
  std::vector<std::uint32_t> train;
  std::vector<std::uint32_t> val;
  std::uint64_t seed = 0;
};

struct TrainedModel {
  std::shared_ptr<const Model<float>> model;
  double duration_seconds = 0.0;
  std::optional<double> val_oa;
};

using Trainer = std::function<TrainedModel(const TrainJob&)>;

enum class TimingMode { wall, modeled };

// Nominal throughput behind modeled durations.
inline constexpr double kModeledMacsPerSecond = 1e9;

// Cost-model duration: forward+backward counted as three forwards.
inline double modeled_seconds(const ModelConfig& c, std::uint64_t samples_trained, std::uint64_t samples_evaluated) {
  return forward_macs(c) * (3.0 * double(samples_trained) + double(samples_evaluated)) / kModeledMacsPerSecond;
}

// Builds a fresh model from the job seed and trains it from scratch.
inline Trainer default_trainer(TimingMode timing) {
  return [timing](const TrainJob& job) {
    Rng rng(job.seed);
    auto initial = build_model<float>(job.config, rng);
    auto result = train_model(initial, *job.data, job.train, job.val, job.options, rng);
    TrainedModel out;
    out.duration_seconds = timing == TimingMode::wall
                               ? result.history.duration_seconds
                               : modeled_seconds(job.config, result.history.samples_trained, result.history.samples_evaluated);
    if (!result.history.epochs.empty()) out.val_oa = result.history.epochs.back().val_accuracy;
    out.model = std::make_shared<const Model<float>>(std::move(result.model));
    return out;
  };
}

struct LedgerRow {
  std::string increment;
  Speed speed = Speed::fast;
  ModelKind model_kind = ModelKind::hs_cnn;
  double data_fraction = 0.0;
  double duration_seconds = 0.0;
  double ensemble_total_seconds = 0.0;
};

// One row per active component; the total repeats on each of them.
inline std::vector<LedgerRow> ledger_rows(const ModelRegistry& reg, const TrainingSchedule& s, std::size_t k) {
  if (k >= s.increments.size() || completed_increments(reg, s) <= k)
    throw StateError("increment " + std::to_string(k + 1) + " is not complete");
  const auto [fast, slow] = reg.active_at(k);
  double total = 0.0;
  std::vector<LedgerRow> rows;
  for (const auto* snap : {&fast, &slow}) {
    if (!*snap) continue;
    total += (*snap)->duration_seconds;
    rows.push_back({s.increments[k].label, (*snap)->speed, (*snap)->model_kind, (*snap)->data_fraction,
                    (*snap)->duration_seconds, 0.0});
  }
  for (auto& r : rows) r.ensemble_total_seconds = total;
  return rows;
}

inline double ledger_total(const ModelRegistry& reg, const TrainingSchedule& s, std::size_t k) {
  return ledger_rows(reg, s, k).front().ensemble_total_seconds;
}

inline constexpr const char* kLedgerHeader = "increment,model_kind,data_fraction,duration_seconds,ensemble_total_seconds\n";

inline std::string ledger_csv(const std::vector<LedgerRow>& rows) {
  std::string out;
  for (const auto& r : rows)
    out += r.increment + "," + to_string(r.model_kind) + "," + io::fixed(r.data_fraction) + "," +
           io::fixed(r.duration_seconds) + "," + io::fixed(r.ensemble_total_seconds) + "\n";
  return out;
}

struct IncrementOptions {
  std::uint64_t seed = 0;
  bool concurrent = true;
};

// Trains the planned actions of increment k (0-based) not yet in the
// registry, then registers them fast first. If any action fails nothing from
// this call is registered and the error names the increment.
inline std::vector<LedgerRow> run_increment(ModelRegistry& reg, const TrainingSchedule& s, std::size_t k,
                                            const ChipDataset& ds, const SplitPlan& split, const Trainer& trainer,
                                            const IncrementOptions& opt = {}) {
  const auto plan = plan_schedule(s);
  if (k >= plan.size()) throw RangeError("increment " + std::to_string(k + 1) + " is not in the schedule");
  const auto done = completed_increments(reg, s);
  if (done > k) throw StateError("increment " + plan[k].label + " already completed");
  if (done < k) throw StateError("increment " + plan[k].label + " requested before " + plan[done].label);
  if (split.increment_fractions != s.fractions()) throw ConfigError("split increments differ from the schedule");

  const auto view = increment_view(split, k);
  std::vector<TrainJob> jobs;
  for (const auto& a : plan[k].actions) {
    if (reg.contains(snapshot_id(a.speed, plan[k].label))) continue;
    TrainJob j;
    j.speed = a.speed;
    j.increment = k;
    j.config = a.speed == Speed::fast ? s.fast_config : s.slow_config;
    j.options = a.speed == Speed::fast ? s.fast_options : s.slow_options;
    j.data = &ds;
    j.train = view.train;
    j.val = view.val;
    j.seed = derive_seed(opt.seed, 2 * k + (a.speed == Speed::slow ? 1 : 0));
    jobs.push_back(std::move(j));
  }

  std::vector<std::optional<TrainedModel>> results(jobs.size());
  std::vector<std::string> errors(jobs.size());
  auto work = [&](std::size_t i) {
    try {
      results[i] = trainer(jobs[i]);
      if (!results[i]->model) throw StateError("trainer returned no model");
    } catch (const std::exception& e) {
      results[i].reset();
      errors[i] = std::string(to_string(jobs[i].speed)) + " model: " + e.what();
    }
  };
  if (opt.concurrent && jobs.size() > 1) {
    std::vector<std::thread> threads;
    for (std::size_t i = 1; i < jobs.size(); ++i) threads.emplace_back(work, i);
    work(0);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t i = 0; i < jobs.size(); ++i) work(i);
  }
  for (const auto& e : errors)
    if (!e.empty()) throw StateError("training failed in increment " + plan[k].label + ", " + e);

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    ModelSnapshot snap;
    snap.id = snapshot_id(jobs[i].speed, plan[k].label);
    snap.speed = jobs[i].speed;
    snap.increment_index = k;
    snap.increment_label = plan[k].label;
    snap.data_fraction = plan[k].fraction;
    snap.duration_seconds = results[i]->duration_seconds;
    snap.val_oa = results[i]->val_oa;
    reg.register_snapshot(std::move(snap), results[i]->model);
  }
  return ledger_rows(reg, s, k);
}

struct ActiveEnsemble {
  EnsembleSpec spec;
  ModelSnapshot fast;
  std::optional<ModelSnapshot> slow;

  // CNN-25 for a lone fast model, ENS-<fast percent> for a pair.
  std::string label() const {
    const auto pct = std::to_string(std::lround(fast.data_fraction * 100));
    return (slow ? "ENS-" : "CNN-") + pct;
  }
};

namespace detail {

inline ActiveEnsemble make_active(const ModelRegistry& reg, std::optional<ModelSnapshot> fast,
                                  std::optional<ModelSnapshot> slow, double w_fast, double w_slow) {
  if (!fast) {
    if (slow) throw StateError("registry holds a slow model but no fast model");
    throw StateError("registry is empty");
  }
  ActiveEnsemble out{{}, *fast, slow};
  out.spec.components.push_back({fast->id, reg.model(fast->id), w_fast});
  if (slow) out.spec.components.push_back({slow->id, reg.model(slow->id), w_slow});
  out.spec.validate();
  return out;
}

}  // namespace detail

inline ActiveEnsemble active_ensemble(const ModelRegistry& reg, double w_fast = 0.5, double w_slow = 0.5) {
  auto [fast, slow] = reg.latest_pair();
  return detail::make_active(reg, std::move(fast), std::move(slow), w_fast, w_slow);
}

// The ensemble that was live right after increment k (0-based).
inline ActiveEnsemble active_ensemble_at(const ModelRegistry& reg, std::size_t k, double w_fast = 0.5,
                                         double w_slow = 0.5) {
  auto [fast, slow] = reg.active_at(k);
  return detail::make_active(reg, std::move(fast), std::move(slow), w_fast, w_slow);
}

}  // namespace twospeed
