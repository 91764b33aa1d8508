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

#include <algorithm>
#include <random>

#include "twospeed/ensemble.hpp"

using namespace twospeed;

namespace {

std::vector<double> random_simplex(std::size_t n, Rng& rng) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> v(n);
  double s = 0;
  for (auto& x : v) s += (x = e(rng));
  for (auto& x : v) x /= s;
  return v;
}

// Plain sum_i w_i p_i / sum_i w_i, no normalization first.
std::vector<double> oracle_average(const std::vector<std::vector<double>>& p, const std::vector<double>& w) {
  std::vector<double> num(p[0].size(), 0.0);
  double den = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    den += w[i];
    for (std::size_t j = 0; j < num.size(); ++j) num[j] += w[i] * p[i][j];
  }
  for (auto& x : num) x /= den;
  return num;
}

ProbabilityTable table_from(std::vector<std::vector<double>> rows) {
  ProbabilityTable t(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), t.row(i).begin());
  return t;
}

}  // namespace

TEST(WeightedAverage, HandExamples) {
  std::vector<std::vector<double>> p{{0.6, 0.4}, {0.2, 0.8}};
  auto a = weighted_average(p, std::vector<double>{0.5, 0.5});
  EXPECT_NEAR(a[0], 0.4, 1e-15);
  EXPECT_NEAR(a[1], 0.6, 1e-15);
  auto b = weighted_average(p, std::vector<double>{0.4, 0.6});
  EXPECT_NEAR(b[0], 0.36, 1e-15);
  EXPECT_NEAR(b[1], 0.64, 1e-15);
}

TEST(WeightedAverage, SingleComponentIsIdentity) {
  Rng rng(1);
  for (double w : {1e-3, 0.5, 1.0, 7.0, 1e6}) {
    std::vector<std::vector<double>> p{random_simplex(5, rng)};
    auto out = weighted_average(p, std::vector<double>{w});
    for (std::size_t j = 0; j < 5; ++j) EXPECT_EQ(out[j], p[0][j]);
  }
}

TEST(WeightedAverage, RejectsBadInput) {
  std::vector<std::vector<double>> p{{0.6, 0.4}, {0.2, 0.8}};
  EXPECT_THROW(weighted_average(p, std::vector<double>{0.5}), InputError);
  EXPECT_THROW(weighted_average(p, std::vector<double>{0.5, 0.0}), InputError);
  EXPECT_THROW(weighted_average(p, std::vector<double>{0.5, -1.0}), InputError);
  EXPECT_THROW(weighted_average(p, std::vector<double>{0.5, std::nan("")}), InputError);
  std::vector<std::vector<double>> q{{0.6, 0.4}, {0.2, 0.7, 0.1}};
  EXPECT_THROW(weighted_average(q, std::vector<double>{1, 1}), InputError);
  std::vector<std::vector<double>> r{{0.6, 0.5}};
  EXPECT_THROW(weighted_average(r, std::vector<double>{1}), InputError);
}

TEST(WeightedAverage, PropertiesOverRandomInstances) {
  Rng rng(42);
  std::uniform_int_distribution<int> nc(1, 4), nm(1, 3);
  std::uniform_real_distribution<double> uw(0.01, 10.0);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = std::size_t(nc(rng)), m = std::size_t(nm(rng));
    std::vector<std::vector<double>> p;
    std::vector<double> w;
    for (std::size_t i = 0; i < m; ++i) p.push_back(random_simplex(n, rng)), w.push_back(uw(rng));
    auto out = weighted_average(p, w);
    auto ref = oracle_average(p, w);
    double s = 0;
    for (std::size_t j = 0; j < n; ++j) {
      EXPECT_NEAR(out[j], ref[j], 1e-12);
      double lo = 1, hi = 0;
      for (const auto& pi : p) lo = std::min(lo, pi[j]), hi = std::max(hi, pi[j]);
      EXPECT_GE(out[j], lo - 1e-15);
      EXPECT_LE(out[j], hi + 1e-15);
      s += out[j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(WeightedAverage, PowerOfTwoScaleIsBitExact) {
  Rng rng(3);
  std::uniform_real_distribution<double> uw(0.05, 0.95);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<std::vector<double>> p{random_simplex(4, rng), random_simplex(4, rng)};
    const double w = uw(rng);
    auto base = weighted_average(p, std::vector<double>{w, 1 - w});
    for (double c : {0.25, 2.0, 1024.0}) {
      auto scaled = weighted_average(p, std::vector<double>{c * w, c * (1 - w)});
      EXPECT_EQ(base, scaled);
    }
  }
}

TEST(WeightedAverage, ArbitraryScaleKeepsArgmaxAndValues) {
  Rng rng(4);
  std::uniform_real_distribution<double> uw(0.05, 0.95), uc(0.001, 1000.0);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<std::vector<double>> p{random_simplex(4, rng), random_simplex(4, rng)};
    const double w = uw(rng), c = uc(rng);
    auto base = weighted_average(p, std::vector<double>{w, 1 - w});
    auto scaled = weighted_average(p, std::vector<double>{c * w, c * (1 - w)});
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(base[j], scaled[j], 1e-15);
    EXPECT_EQ(argmax(base), argmax(scaled));
  }
}

TEST(WeightedAverage, OneHotWeightLimit) {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<double>> p{random_simplex(6, rng), random_simplex(6, rng)};
    const double wa = 1 - 1e-9;
    auto out = weighted_average(p, std::vector<double>{wa, 1 - wa});
    for (std::size_t j = 0; j < 6; ++j) EXPECT_NEAR(out[j], p[0][j], 1e-8);
  }
}

TEST(Sweep, GridIsTheNinePairs) {
  auto g = sweep_grid();
  ASSERT_EQ(g.size(), 9u);
  for (int k = 1; k <= 9; ++k) {
    EXPECT_DOUBLE_EQ(g[k - 1].first, k / 10.0);
    EXPECT_DOUBLE_EQ(g[k - 1].first + g[k - 1].second, 1.0);
  }
}

TEST(Sweep, IdenticalComponentsGiveFlatRowAndCentreBest) {
  auto t = table_from({{0.7, 0.3}, {0.4, 0.6}, {0.9, 0.1}});
  std::vector<int> labels{0, 0, 1};
  auto r = weight_sweep(t, t, labels);
  ASSERT_EQ(r.rows.size(), 9u);
  for (const auto& row : r.rows) EXPECT_DOUBLE_EQ(row.overall_accuracy, 1.0 / 3);
  EXPECT_DOUBLE_EQ(r.best_row().w_a, 0.5);
}

TEST(Sweep, TieBreakPrefersLargerFirstWeight) {
  // A right on sample 0, B right on sample 1; A confident, B mild.
  auto a = table_from({{0.9, 0.1}, {0.9, 0.1}});
  auto b = table_from({{0.4, 0.6}, {0.1, 0.9}});
  std::vector<int> labels{0, 1};
  auto r = weight_sweep(a, b, labels);
  std::vector<double> expect;
  for (auto [wa, wb] : sweep_grid()) {
    int ok = 0;
    for (int i = 0; i < 2; ++i) {
      const double p0 = wa * a.row(i)[0] + wb * b.row(i)[0], p1 = wa * a.row(i)[1] + wb * b.row(i)[1];
      ok += (p1 > p0 ? 1 : 0) == labels[i];
    }
    expect.push_back(ok / 2.0);
  }
  for (std::size_t k = 0; k < 9; ++k) EXPECT_DOUBLE_EQ(r.rows[k].overall_accuracy, expect[k]) << k;
  const double top = *std::max_element(expect.begin(), expect.end());
  int best_k = -1;
  for (int k = 1; k <= 9; ++k)
    if (expect[k - 1] == top && (best_k < 0 || std::abs(k - 5) < std::abs(best_k - 5) ||
                                 (std::abs(k - 5) == std::abs(best_k - 5) && k > best_k)))
      best_k = k;
  EXPECT_DOUBLE_EQ(r.best_row().w_a, best_k / 10.0);
}

TEST(Sweep, SymmetricTieGoesToLargerFirstWeight) {
  // Sample 0 is right only for w_a > 0.5, sample 1 only for w_a < 0.5; at
  // 50:50 both tie and resolve to class 0, which is wrong for both.
  auto a = table_from({{0.0, 1.0}, {1.0, 0.0}});
  auto b = table_from({{1.0, 0.0}, {0.0, 1.0}});
  std::vector<int> labels{1, 1};
  auto r = weight_sweep(a, b, labels);
  EXPECT_DOUBLE_EQ(r.rows[4].overall_accuracy, 0.0);
  for (std::size_t k : {0u, 1u, 2u, 3u, 5u, 6u, 7u, 8u}) EXPECT_DOUBLE_EQ(r.rows[k].overall_accuracy, 0.5);
  EXPECT_DOUBLE_EQ(r.best_row().w_a, 0.6);
}

TEST(Sweep, CsvFormat) {
  auto t = table_from({{0.7, 0.3}, {0.4, 0.6}});
  std::vector<int> labels{0, 1};
  const auto csv = sweep_csv(weight_sweep(t, t, labels));
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "w_cnn,w_vit,overall_accuracy");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 10);
  EXPECT_NE(csv.find("\n0.1,0.9,1.000000\n"), std::string::npos);
  EXPECT_NE(csv.find("\n0.9,0.1,1.000000\n"), std::string::npos);
}

TEST(Sweep, EmptyEvalSetRejected) {
  ProbabilityTable t(0, 2);
  EXPECT_THROW(weight_sweep(t, t, std::vector<int>{}), InputError);
}

class EnsembleModels : public ::testing::Test {
 protected:
  void SetUp() override {
    ds = generate_synthetic(parse_class_specs("default6"), 4, 9).data;
    for (std::uint32_t i = 0; i < ds.size(); ++i) idx.push_back(i);
    Rng rng(2);
    cnn = std::make_shared<Model<float>>(build_hs_cnn<float>(HsCnnConfig::mini(6), rng));
    vit = std::make_shared<Model<float>>(build_vit<float>(VitConfig::tiny(6), rng));
  }
  ChipDataset ds;
  std::vector<std::uint32_t> idx;
  std::shared_ptr<Model<float>> cnn, vit;
};

TEST_F(EnsembleModels, OneComponentMatchesModel) {
  EnsembleSpec spec{{{"cnn", cnn, 3.0}}};
  auto out = ensemble_predict(spec, ds, idx);
  auto direct = predict_probabilities(*cnn, ds, idx);
  EXPECT_EQ(out.probabilities, direct);
  EXPECT_EQ(out.classes, argmax_rows(direct));
}

TEST_F(EnsembleModels, TwoCopiesMatchSingleModel) {
  EnsembleSpec spec{{{"a", vit, 0.3}, {"b", vit, 0.7}}};
  EXPECT_EQ(ensemble_predict(spec, ds, idx).classes, argmax_rows(predict_probabilities(*vit, ds, idx)));
}

TEST_F(EnsembleModels, MixedEnsembleMatchesTableOracle) {
  EnsembleSpec spec{{{"cnn", cnn, 0.4}, {"vit", vit, 0.6}}};
  auto out = ensemble_predict(spec, ds, idx);
  auto a = predict_probabilities(*cnn, ds, idx), b = predict_probabilities(*vit, ds, idx);
  for (std::size_t k = 0; k < a.values.size(); ++k)
    EXPECT_NEAR(out.probabilities.values[k], (0.4 * a.values[k] + 0.6 * b.values[k]) / 1.0, 1e-12);
}

TEST_F(EnsembleModels, ComponentFailureNamesComponent) {
  auto bad_idx = idx;
  bad_idx.push_back(std::uint32_t(ds.size()));
  EnsembleSpec spec{{{"cnn", cnn, 0.5}, {"vit", vit, 0.5}}};
  try {
    ensemble_predict(spec, ds, bad_idx);
    FAIL() << "expected ComponentError";
  } catch (const ComponentError& e) {
    EXPECT_EQ(e.component(), "cnn");
  }
}

TEST_F(EnsembleModels, SpecValidation) {
  EXPECT_THROW(EnsembleSpec{}.validate(), InputError);
  EXPECT_THROW((EnsembleSpec{{{"a", cnn, 0.0}}}.validate()), InputError);
  Rng rng(1);
  auto three = std::make_shared<Model<float>>(build_hs_cnn<float>(HsCnnConfig::mini(3), rng));
  EXPECT_THROW((EnsembleSpec{{{"a", cnn, 1.0}, {"b", three, 1.0}}}.validate()), InputError);
}
