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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "twospeed/errors.hpp"
#include "twospeed/io.hpp"

namespace twospeed {

// Rows are true classes, columns predicted classes.
struct ConfusionMatrix {
  std::size_t n_classes = 0;
  std::vector<std::uint64_t> counts;
  std::vector<std::string> class_names;

  std::uint64_t at(std::size_t t, std::size_t p) const { return counts.at(t * n_classes + p); }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
  std::uint64_t row_sum(std::size_t t) const {
    std::uint64_t s = 0;
    for (std::size_t p = 0; p < n_classes; ++p) s += at(t, p);
    return s;
  }
  std::uint64_t col_sum(std::size_t p) const {
    std::uint64_t s = 0;
    for (std::size_t t = 0; t < n_classes; ++t) s += at(t, p);
    return s;
  }
  bool operator==(const ConfusionMatrix&) const = default;
};

inline ConfusionMatrix confusion_matrix(std::span<const int> truth, std::span<const int> pred, std::size_t n_classes,
                                        std::vector<std::string> class_names = {}) {
  if (truth.size() != pred.size())
    throw InputError(std::to_string(truth.size()) + " true labels but " + std::to_string(pred.size()) + " predictions");
  if (class_names.empty())
    for (std::size_t c = 0; c < n_classes; ++c) class_names.push_back("class" + std::to_string(c));
  if (class_names.size() != n_classes) throw InputError("class name count differs from class count");
  ConfusionMatrix cm{n_classes, std::vector<std::uint64_t>(n_classes * n_classes, 0), std::move(class_names)};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || std::size_t(truth[i]) >= n_classes || pred[i] < 0 || std::size_t(pred[i]) >= n_classes)
      throw InputError("label out of range at sample " + std::to_string(i));
    ++cm.counts[std::size_t(truth[i]) * n_classes + std::size_t(pred[i])];
  }
  return cm;
}

inline double overall_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw UndefinedMetricError("overall accuracy of an empty confusion matrix");
  std::uint64_t trace = 0;
  for (std::size_t c = 0; c < cm.n_classes; ++c) trace += cm.at(c, c);
  return double(trace) / double(total);
}

struct ClassScores {
  std::vector<double> precision, recall, f1;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
};

// A metric whose denominator is zero is 0.
inline ClassScores precision_recall_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw UndefinedMetricError("precision/recall of an empty confusion matrix");
  ClassScores s;
  const std::size_t n = cm.n_classes;
  for (std::size_t c = 0; c < n; ++c) {
    const double tp = double(cm.at(c, c));
    const auto col = cm.col_sum(c), row = cm.row_sum(c);
    const double p = col ? tp / double(col) : 0.0;
    const double r = row ? tp / double(row) : 0.0;
    const double f = p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
    s.precision.push_back(p);
    s.recall.push_back(r);
    s.f1.push_back(f);
    s.macro_precision += p;
    s.macro_recall += r;
    s.macro_f1 += f;
  }
  s.macro_precision /= double(n);
  s.macro_recall /= double(n);
  s.macro_f1 /= double(n);
  return s;
}

struct MetricsReport {
  std::string model;
  std::string increment;
  double train_fraction_fast = 0.0;
  std::optional<double> train_fraction_slow;
  std::uint64_t n_eval = 0;
  double oa = 0.0;
  double macro_precision = 0.0, macro_recall = 0.0, macro_f1 = 0.0;
  double training_total_seconds = 0.0;
};

inline MetricsReport make_report(const ConfusionMatrix& cm, std::string model, std::string increment) {
  MetricsReport r;
  r.model = std::move(model);
  r.increment = std::move(increment);
  r.n_eval = cm.total();
  r.oa = overall_accuracy(cm);
  const auto s = precision_recall_f1(cm);
  r.macro_precision = s.macro_precision;
  r.macro_recall = s.macro_recall;
  r.macro_f1 = s.macro_f1;
  return r;
}

inline constexpr const char* kMetricsHeader =
    "model,increment,train_fraction_fast,train_fraction_slow,n_eval,oa,macro_precision,macro_recall,macro_f1,"
    "training_total_seconds\n";

inline std::string metrics_row(const MetricsReport& r) {
  std::string s = r.model + "," + r.increment + "," + io::fixed(r.train_fraction_fast) + ",";
  if (r.train_fraction_slow) s += io::fixed(*r.train_fraction_slow);
  s += "," + std::to_string(r.n_eval) + "," + io::fixed(r.oa) + "," + io::fixed(r.macro_precision) + "," +
       io::fixed(r.macro_recall) + "," + io::fixed(r.macro_f1) + "," + io::fixed(r.training_total_seconds) + "\n";
  return s;
}

inline std::string confusion_csv(const ConfusionMatrix& cm) {
  std::string s = "true\\pred";
  for (const auto& n : cm.class_names) s += "," + n;
  s += "\n";
  for (std::size_t t = 0; t < cm.n_classes; ++t) {
    s += cm.class_names[t];
    for (std::size_t p = 0; p < cm.n_classes; ++p) s += "," + std::to_string(cm.at(t, p));
    s += "\n";
  }
  return s;
}

inline ConfusionMatrix parse_confusion_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    return out;
  };
  if (!std::getline(in, line)) throw InputError("confusion CSV is empty");
  auto header = split(line);
  if (header.size() < 2) throw InputError("confusion CSV header has no classes");
  ConfusionMatrix cm;
  cm.class_names.assign(header.begin() + 1, header.end());
  cm.n_classes = cm.class_names.size();
  for (std::size_t t = 0; t < cm.n_classes; ++t) {
    if (!std::getline(in, line)) throw InputError("confusion CSV has too few rows");
    auto cells = split(line);
    if (cells.size() != cm.n_classes + 1) throw InputError("confusion CSV row " + std::to_string(t) + " has the wrong width");
    if (cells[0] != cm.class_names[t]) throw InputError("confusion CSV row label '" + cells[0] + "' out of order");
    for (std::size_t p = 1; p < cells.size(); ++p) {
      std::size_t used = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(cells[p], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != cells[p].size()) throw InputError("bad count '" + cells[p] + "' in confusion CSV");
      cm.counts.push_back(v);
    }
  }
  if (std::getline(in, line) && !line.empty()) throw InputError("confusion CSV has extra rows");
  return cm;
}

// Appends one row to <dir>/metrics.csv and writes <dir>/confusion_<id>.csv.
inline void emit_report(const MetricsReport& r, const ConfusionMatrix& cm, const std::filesystem::path& dir,
                        const std::string& id) {
  try {
    io::append_atomic(dir / "metrics.csv", kMetricsHeader, metrics_row(r));
    io::write_file_atomic(dir / ("confusion_" + id + ".csv"), confusion_csv(cm));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(e.what());
  }
}

}  // namespace twospeed
