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
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "twospeed/io.hpp"
#include "twospeed/table.hpp"
#include "twospeed/train.hpp"

namespace twospeed {

namespace detail {

inline void check_weight(double w) {
  if (!std::isfinite(w) || w <= 0.0) throw InputError("ensemble weights must be positive and finite, got " + io::fixed(w));
}

// Weights scaled to sum 1. Dividing first keeps p-bar independent of the
// overall weight scale.
inline std::vector<double> normalized(std::span<const double> weights) {
  if (weights.empty()) throw InputError("an ensemble needs at least one component");
  double total = 0.0;
  for (double w : weights) check_weight(w), total += w;
  std::vector<double> out(weights.begin(), weights.end());
  for (double& w : out) w /= total;
  return out;
}

inline constexpr double kSumTolerance = 1e-6;

}  // namespace detail

// p-bar = sum_i w_i p_i / sum_i w_i.
inline std::vector<double> weighted_average(std::span<const std::vector<double>> probs, std::span<const double> weights) {
  if (probs.size() != weights.size())
    throw InputError(std::to_string(probs.size()) + " probability vectors but " + std::to_string(weights.size()) +
                     " weights");
  const auto w = detail::normalized(weights);
  const std::size_t n = probs.front().size();
  std::vector<double> out(n, 0.0);
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i].size() != n) throw InputError("probability vectors differ in length");
    double s = 0.0;
    for (double p : probs[i]) s += p;
    if (std::abs(s - 1.0) > detail::kSumTolerance)
      throw InputError("probability vector " + std::to_string(i) + " sums to " + io::fixed(s, 9));
    for (std::size_t j = 0; j < n; ++j) out[j] += w[i] * probs[i][j];
  }
  return out;
}

// Rowwise weighted average of several probability tables of equal shape.
inline ProbabilityTable combine_tables(std::span<const ProbabilityTable* const> tables, std::span<const double> weights) {
  if (tables.size() != weights.size()) throw InputError("table and weight counts differ");
  const auto w = detail::normalized(weights);
  ProbabilityTable out(tables.front()->rows, tables.front()->cols);
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const auto& t = *tables[i];
    if (t.rows != out.rows || t.cols != out.cols) throw InputError("probability tables differ in shape");
    for (std::size_t k = 0; k < t.values.size(); ++k) out.values[k] += w[i] * t.values[k];
  }
  return out;
}

struct EnsembleComponent {
  std::string id;
  std::shared_ptr<const Model<float>> model;
  double weight = 1.0;
};

struct EnsembleSpec {
  std::vector<EnsembleComponent> components;

  void validate() const {
    if (components.empty()) throw InputError("an ensemble needs at least one component");
    for (const auto& c : components) {
      if (!c.model) throw InputError("component '" + c.id + "' has no model");
      detail::check_weight(c.weight);
    }
    const std::size_t k = components.front().model->num_classes();
    for (const auto& c : components)
      if (c.model->num_classes() != k) throw InputError("components disagree on the number of classes");
  }

  std::vector<double> weights() const {
    std::vector<double> w;
    for (const auto& c : components) w.push_back(c.weight);
    return w;
  }
};

struct EnsemblePrediction {
  std::vector<int> classes;
  ProbabilityTable probabilities;
};

inline EnsemblePrediction ensemble_predict(const EnsembleSpec& spec, const ChipDataset& ds,
                                           std::span<const std::uint32_t> indices) {
  spec.validate();
  std::vector<ProbabilityTable> tables;
  for (const auto& c : spec.components) {
    try {
      tables.push_back(predict_probabilities(*c.model, ds, indices));
    } catch (const std::exception& e) {
      throw ComponentError(c.id, e.what());
    }
  }
  std::vector<const ProbabilityTable*> ptrs;
  for (const auto& t : tables) ptrs.push_back(&t);
  const auto w = spec.weights();
  EnsemblePrediction out;
  out.probabilities = combine_tables(ptrs, w);
  out.classes = argmax_rows(out.probabilities);
  return out;
}

struct SweepRow {
  double w_a = 0.0;
  double w_b = 0.0;
  std::size_t correct = 0;
  double overall_accuracy = 0.0;
};

struct SweepResult {
  std::vector<SweepRow> rows;
  std::size_t best = 0;
  const SweepRow& best_row() const { return rows.at(best); }
};

// The nine pairs (0.1, 0.9) ... (0.9, 0.1).
inline std::vector<std::pair<double, double>> sweep_grid() {
  std::vector<std::pair<double, double>> g;
  for (int k = 1; k <= 9; ++k) g.emplace_back(k / 10.0, (10 - k) / 10.0);
  return g;
}

// Best row: highest accuracy, then the pair nearest 50:50, then larger w_a.
inline SweepResult weight_sweep(const ProbabilityTable& a, const ProbabilityTable& b, std::span<const int> labels) {
  if (labels.empty()) throw InputError("weight sweep needs a non-empty evaluation set");
  if (a.rows != labels.size() || b.rows != labels.size()) throw InputError("probability tables and labels differ in length");
  SweepResult out;
  const ProbabilityTable* tables[] = {&a, &b};
  int best_k = 0;
  for (const auto& [wa, wb] : sweep_grid()) {
    const double w[] = {wa, wb};
    const auto pred = argmax_rows(combine_tables(tables, w));
    SweepRow row{wa, wb, 0, 0.0};
    for (std::size_t i = 0; i < labels.size(); ++i) row.correct += pred[i] == labels[i];
    row.overall_accuracy = double(row.correct) / double(labels.size());
    const int k = int(std::lround(wa * 10));
    if (!out.rows.empty()) {
      const auto& cur = out.rows[out.best];
      const bool better = row.correct > cur.correct ||
                          (row.correct == cur.correct &&
                           (std::abs(k - 5) < std::abs(best_k - 5) || (std::abs(k - 5) == std::abs(best_k - 5) && k > best_k)));
      if (better) out.best = out.rows.size(), best_k = k;
    } else {
      best_k = k;
    }
    out.rows.push_back(row);
  }
  return out;
}

inline SweepResult weight_sweep(const Model<float>& a, const Model<float>& b, const ChipDataset& ds,
                                std::span<const std::uint32_t> indices) {
  if (indices.empty()) throw InputError("weight sweep needs a non-empty evaluation set");
  std::vector<int> labels;
  for (auto i : indices) labels.push_back(ds.labels.at(i));
  return weight_sweep(predict_probabilities(a, ds, indices), predict_probabilities(b, ds, indices), labels);
}

inline std::string sweep_csv(const SweepResult& r) {
  std::string s = "w_cnn,w_vit,overall_accuracy\n";
  for (const auto& row : r.rows) s += io::fixed(row.w_a, 1) + "," + io::fixed(row.w_b, 1) + "," + io::fixed(row.overall_accuracy) + "\n";
  return s;
}

inline void write_sweep_csv(const SweepResult& r, const std::filesystem::path& path) {
  io::write_file_atomic(path, sweep_csv(r));
}

}  // namespace twospeed
