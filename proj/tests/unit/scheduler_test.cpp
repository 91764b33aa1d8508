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
#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <random>
#include <thread>

#include "twospeed/scheduler.hpp"

using namespace twospeed;
namespace fs = std::filesystem;

namespace {

constexpr double hms(int h, int m, int s) { return h * 3600.0 + m * 60.0 + s; }

// Training times per increment from the original experiment.
const double kCnnSeconds[] = {hms(0, 7, 23), hms(0, 14, 36), hms(0, 21, 35), hms(0, 28, 34)};
const double kVitSeconds[] = {hms(1, 3, 45), hms(2, 4, 30), hms(3, 7, 29), hms(4, 9, 39)};

struct Fixture {
  TrainingSchedule schedule;
  ChipDataset ds = generate_synthetic({ClassSpec::texture(2), ClassSpec::texture(4)}, 20, 1).data;
  SplitPlan split;
  std::shared_ptr<const Model<float>> cnn, vit;

  Fixture() {
    schedule.fast_config = HsCnnConfig::mini(2);
    schedule.slow_config = VitConfig::tiny(2);
    split = make_split_plan(ds, 5, 0.2, 0.1, schedule.fractions());
    Rng rng(1);
    cnn = std::make_shared<const Model<float>>(build_hs_cnn<float>(HsCnnConfig::mini(2), rng));
    vit = std::make_shared<const Model<float>>(build_vit<float>(VitConfig::tiny(2), rng));
  }

  Trainer fixed_clock() const {
    return [this](const TrainJob& j) {
      return TrainedModel{j.speed == Speed::fast ? cnn : vit,
                          j.speed == Speed::fast ? kCnnSeconds[j.increment] : kVitSeconds[j.increment], 0.5};
    };
  }
};

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("twospeed_sched_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(Plan, DefaultMatchesStaggeredTable) {
  auto plan = plan_schedule(TrainingSchedule{});
  ASSERT_EQ(plan.size(), 4u);
  using A = std::vector<PlannedAction>;
  EXPECT_EQ(plan[0].actions, (A{{Speed::fast, 0.25}}));
  EXPECT_EQ(plan[1].actions, (A{{Speed::fast, 0.5}, {Speed::slow, 0.5}}));
  EXPECT_EQ(plan[2].actions, (A{{Speed::fast, 0.75}}));
  EXPECT_EQ(plan[3].actions, (A{{Speed::fast, 1.0}, {Speed::slow, 1.0}}));
}

TEST(Plan, CadenceOneTrainsSlowEveryTime) {
  TrainingSchedule s;
  s.slow_cadence = 1;
  for (const auto& inc : plan_schedule(s)) EXPECT_EQ(inc.actions.size(), 2u);
}

TEST(Plan, SingleIncrementHasOnlyFast) {
  TrainingSchedule s;
  s.increments = {{"T1", 1.0}};
  auto plan = plan_schedule(s);
  ASSERT_EQ(plan.size(), 1u);
  EXPECT_EQ(plan[0].actions, (std::vector<PlannedAction>{{Speed::fast, 1.0}}));
}

TEST(Plan, GeneralCadence) {
  TrainingSchedule s;
  s.increments.clear();
  for (int k = 1; k <= 9; ++k) s.increments.push_back({"T" + std::to_string(k), k / 9.0});
  s.increments.back().fraction = 1.0;
  s.slow_cadence = 3;
  auto plan = plan_schedule(s);
  for (std::size_t k = 0; k < 9; ++k) EXPECT_EQ(plan[k].actions.size(), (k + 1) % 3 == 0 ? 2u : 1u) << k;
}

TEST(Plan, InvalidSchedulesRejected) {
  TrainingSchedule s;
  s.slow_cadence = 0;
  EXPECT_THROW(plan_schedule(s), ConfigError);
  s = {};
  s.increments = {{"T1", 0.5}, {"T2", 0.5}, {"T3", 1.0}};
  EXPECT_THROW(plan_schedule(s), ConfigError);
  s.increments = {{"T1", 0.5}, {"T2", 0.9}};
  EXPECT_THROW(plan_schedule(s), ConfigError);
  s.increments = {{"T1", 0.5}, {"T1", 1.0}};
  EXPECT_THROW(plan_schedule(s), ConfigError);
  s = {};
  s.slow_config = VitConfig::tiny(5);
  EXPECT_THROW(plan_schedule(s), ConfigError);
}

TEST(Schedule, RegistryTraceAndLabelsFollowTable) {
  Fixture f;
  ModelRegistry reg;
  const std::vector<std::pair<double, std::optional<double>>> expect{{0.25, {}}, {0.5, 0.5}, {0.75, 0.5}, {1.0, 1.0}};
  const std::vector<std::string> labels{"CNN-25", "ENS-50", "ENS-75", "ENS-100"};
  for (std::size_t k = 0; k < 4; ++k) {
    run_increment(reg, f.schedule, k, f.ds, f.split, f.fixed_clock());
    auto [fast, slow] = reg.latest_pair();
    ASSERT_TRUE(fast);
    EXPECT_EQ(fast->data_fraction, expect[k].first);
    EXPECT_EQ(slow.has_value(), expect[k].second.has_value());
    if (slow) {
      EXPECT_EQ(slow->data_fraction, *expect[k].second);
    }
    auto active = active_ensemble(reg);
    EXPECT_EQ(active.label(), labels[k]);
    EXPECT_EQ(active.spec.components.size(), slow ? 2u : 1u);
  }
  EXPECT_EQ(reg.snapshots().size(), 6u);
}

TEST(Schedule, LedgerTotalsAreComponentSums) {
  Fixture f;
  ModelRegistry reg;
  for (std::size_t k = 0; k < 4; ++k) run_increment(reg, f.schedule, k, f.ds, f.split, f.fixed_clock());
  EXPECT_EQ(ledger_total(reg, f.schedule, 0), hms(0, 7, 23));
  EXPECT_EQ(ledger_total(reg, f.schedule, 1), hms(2, 19, 6));
  EXPECT_EQ(ledger_total(reg, f.schedule, 2), kCnnSeconds[2] + kVitSeconds[1]);
  EXPECT_EQ(ledger_total(reg, f.schedule, 3), kCnnSeconds[3] + kVitSeconds[3]);
  auto rows = ledger_rows(reg, f.schedule, 2);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(ledger_csv(rows), "T3,hs_cnn,0.750000,1295.000000,8765.000000\nT3,vit,0.500000,7470.000000,8765.000000\n");
}

TEST(Schedule, ZeroDurationTrainersTotalZero) {
  Fixture f;
  ModelRegistry reg;
  Trainer zero = [&](const TrainJob& j) { return TrainedModel{j.speed == Speed::fast ? f.cnn : f.vit, 0.0, {}}; };
  for (std::size_t k = 0; k < 4; ++k) {
    run_increment(reg, f.schedule, k, f.ds, f.split, zero);
    EXPECT_EQ(ledger_total(reg, f.schedule, k), 0.0);
  }
}

TEST(Schedule, LedgerAdditivityOverRandomSchedules) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> dur(0.0, 5000.0);
  std::uniform_int_distribution<int> len(1, 7), cad(1, 4);
  for (int trial = 0; trial < 30; ++trial) {
    Fixture f;
    const int n = len(rng);
    f.schedule.increments.clear();
    for (int k = 1; k <= n; ++k) f.schedule.increments.push_back({"T" + std::to_string(k), double(k) / n});
    f.schedule.increments.back().fraction = 1.0;
    f.schedule.slow_cadence = std::size_t(cad(rng));
    f.split = make_split_plan(f.ds, 5, 0.2, 0.1, f.schedule.fractions());
    std::map<std::string, double> recorded;
    Trainer mock = [&](const TrainJob& j) {
      const double d = std::round(dur(rng) * 64) / 64;
      recorded[snapshot_id(j.speed, f.schedule.increments[j.increment].label)] = d;
      return TrainedModel{j.speed == Speed::fast ? f.cnn : f.vit, d, {}};
    };
    ModelRegistry reg;
    for (std::size_t k = 0; k < std::size_t(n); ++k) {
      run_increment(reg, f.schedule, k, f.ds, f.split, mock, {0, false});
      auto active = active_ensemble(reg);
      double sum = recorded.at(active.fast.id);
      if (active.slow) sum += recorded.at(active.slow->id);
      EXPECT_EQ(ledger_total(reg, f.schedule, k), sum);
    }
  }
}

TEST(Schedule, OrderingEnforced) {
  Fixture f;
  ModelRegistry reg;
  EXPECT_THROW(run_increment(reg, f.schedule, 1, f.ds, f.split, f.fixed_clock()), StateError);
  run_increment(reg, f.schedule, 0, f.ds, f.split, f.fixed_clock());
  EXPECT_THROW(run_increment(reg, f.schedule, 0, f.ds, f.split, f.fixed_clock()), StateError);
  EXPECT_THROW(run_increment(reg, f.schedule, 7, f.ds, f.split, f.fixed_clock()), RangeError);
  EXPECT_THROW(ledger_total(reg, f.schedule, 1), StateError);
}

TEST(Schedule, FailedActionLeavesRegistryUntouched) {
  Fixture f;
  auto dir = fresh_dir("atomic");
  ModelRegistry reg(dir);
  run_increment(reg, f.schedule, 0, f.ds, f.split, f.fixed_clock());
  const auto before = reg.snapshots();
  const auto log_before = io::read_text(dir / "log.tsv");
  Trainer slow_fails = [&](const TrainJob& j) {
    if (j.speed == Speed::slow) throw std::runtime_error("out of memory");
    return f.fixed_clock()(j);
  };
  try {
    run_increment(reg, f.schedule, 1, f.ds, f.split, slow_fails);
    FAIL();
  } catch (const StateError& e) {
    EXPECT_NE(std::string(e.what()).find("T2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("out of memory"), std::string::npos);
  }
  EXPECT_EQ(reg.snapshots(), before);
  EXPECT_EQ(reg.latest(Speed::fast)->id, "fast-T1");
  EXPECT_FALSE(reg.latest(Speed::slow));
  EXPECT_EQ(io::read_text(dir / "log.tsv"), log_before);
  run_increment(reg, f.schedule, 1, f.ds, f.split, f.fixed_clock());
  EXPECT_EQ(reg.latest(Speed::slow)->id, "slow-T2");
}

TEST(Schedule, NewFastSnapshotKeepsSlowComponent) {
  Fixture f;
  ModelRegistry reg;
  run_increment(reg, f.schedule, 0, f.ds, f.split, f.fixed_clock());
  run_increment(reg, f.schedule, 1, f.ds, f.split, f.fixed_clock());
  const auto a = active_ensemble(reg);
  run_increment(reg, f.schedule, 2, f.ds, f.split, f.fixed_clock());
  const auto b = active_ensemble(reg);
  EXPECT_EQ(a.slow->id, b.slow->id);
  EXPECT_NE(a.fast.id, b.fast.id);
  EXPECT_EQ(b.spec.components[1].id, a.spec.components[1].id);
}

TEST(Schedule, EmptyRegistryHasNoEnsemble) {
  ModelRegistry reg;
  EXPECT_THROW(active_ensemble(reg), StateError);
}

TEST(Schedule, JobsSeeNestedIncrementData) {
  Fixture f;
  ModelRegistry reg;
  std::vector<std::size_t> sizes;
  Trainer spy = [&](const TrainJob& j) {
    EXPECT_EQ(j.data, &f.ds);
    if (j.speed == Speed::fast) sizes.push_back(j.train.size() + j.val.size());
    return f.fixed_clock()(j);
  };
  for (std::size_t k = 0; k < 4; ++k) run_increment(reg, f.schedule, k, f.ds, f.split, spy);
  ASSERT_EQ(sizes.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(sizes[k], increment_size(f.split, k));
}

TEST(Registry, PersistsAndReplays) {
  Fixture f;
  auto dir = fresh_dir("replay");
  {
    ModelRegistry reg(dir);
    for (std::size_t k = 0; k < 3; ++k) run_increment(reg, f.schedule, k, f.ds, f.split, f.fixed_clock());
  }
  ModelRegistry back(dir);
  EXPECT_EQ(back.snapshots().size(), 4u);
  EXPECT_EQ(completed_increments(back, f.schedule), 3u);
  EXPECT_EQ(back.latest(Speed::fast)->id, "fast-T3");
  EXPECT_EQ(back.latest(Speed::slow)->id, "slow-T2");
  EXPECT_EQ(save_model(*back.model("slow-T2")), save_model(*f.vit));
  run_increment(back, f.schedule, 3, f.ds, f.split, f.fixed_clock());
  EXPECT_EQ(ledger_total(back, f.schedule, 3), kCnnSeconds[3] + kVitSeconds[3]);
  const auto log = io::read_text(dir / "log.tsv");
  EXPECT_EQ(log.substr(0, log.find('\n') + 1), detail::kRegistryHeader);
  EXPECT_NE(log.find("slow-T2\tslow\tvit\t1\tT2\t0.500000\t7470.000000\t0.500000\tmodels/slow-T2.tspd\n"), std::string::npos);
}

TEST(Registry, CorruptLogRejected) {
  auto dir = fresh_dir("corrupt");
  fs::create_directories(dir);
  io::write_file_atomic(dir / "log.tsv", std::string(detail::kRegistryHeader) + "x\tfast\n");
  EXPECT_THROW(ModelRegistry{dir}, LoadError);
  io::write_file_atomic(dir / "log.tsv", std::string(detail::kRegistryHeader) +
                                             "fast-T1\tfast\ths_cnn\t0\tT1\t0.25\t1\t\tmodels/fast-T1.tspd\n");
  EXPECT_THROW(ModelRegistry{dir}, LoadError);  // model file missing
  io::write_file_atomic(dir / "log.tsv", "bogus\n");
  EXPECT_THROW(ModelRegistry{dir}, LoadError);
}

TEST(Registry, DuplicateIdRejected) {
  Fixture f;
  ModelRegistry reg;
  ModelSnapshot s;
  s.id = "fast-T1";
  reg.register_snapshot(s, f.cnn);
  EXPECT_THROW(reg.register_snapshot(s, f.cnn), StateError);
  s.id = "bad\tid";
  EXPECT_THROW(reg.register_snapshot(s, f.cnn), InputError);
}

TEST(Registry, ConcurrentReadersSeeConsistentPairs) {
  Fixture f;
  f.schedule.slow_cadence = 1;
  ModelRegistry reg;
  std::atomic<bool> stop{false};
  std::atomic<int> bad{0}, reads{0};
  std::thread reader([&] {
    while (!stop) {
      auto [fast, slow] = reg.latest_pair();
      ++reads;
      // fast always registers first, so a slow snapshot is never ahead of fast
      if (slow && (!fast || slow->increment_index > fast->increment_index)) ++bad;
    }
  });
  Trainer slowish = [&](const TrainJob& j) {
    std::this_thread::sleep_for(std::chrono::milliseconds(j.speed == Speed::slow ? 3 : 1));
    return f.fixed_clock()(j);
  };
  for (std::size_t k = 0; k < 4; ++k) run_increment(reg, f.schedule, k, f.ds, f.split, slowish, {0, true});
  stop = true;
  reader.join();
  EXPECT_EQ(bad, 0);
  EXPECT_GT(reads, 0);
}

TEST(Schedule, RealTrainerIsDeterministic) {
  Fixture f;
  f.schedule.fast_options.epochs = 1;
  f.schedule.slow_options.epochs = 1;
  auto run = [&](const std::string& name) {
    auto dir = fresh_dir(name);
    ModelRegistry reg(dir);
    for (std::size_t k = 0; k < 2; ++k)
      run_increment(reg, f.schedule, k, f.ds, f.split, default_trainer(TimingMode::modeled), {9, true});
    return std::make_pair(io::read_text(dir / "log.tsv"), io::read_file(dir / "models/slow-T2.tspd"));
  };
  auto a = run("det_a"), b = run("det_b");
  EXPECT_EQ(a, b);
}

TEST(Timing, ModeledSecondsScaleWithWork) {
  const ModelConfig c = HsCnnConfig::mini(6);
  EXPECT_DOUBLE_EQ(modeled_seconds(c, 0, 0), 0.0);
  EXPECT_DOUBLE_EQ(modeled_seconds(c, 10, 0), 3 * modeled_seconds(c, 0, 10));
  EXPECT_DOUBLE_EQ(modeled_seconds(c, 20, 0), 2 * modeled_seconds(c, 10, 0));
}
