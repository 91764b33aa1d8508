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

// Independent reference computations used by tests. Nothing here calls into
// the library beyond reading dataset bytes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <vector>

#include "twospeed/data.hpp"

namespace twospeed::oracle {

// Per-class mean of every chip byte.
inline std::vector<std::vector<double>> class_centroids(const ChipDataset& train) {
  std::vector<std::vector<double>> centroid(train.num_classes(), std::vector<double>(kChipBytes, 0.0));
  std::vector<double> count(train.num_classes(), 0.0);
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto chip = train.chip(i);
    auto& cen = centroid[train.labels[i]];
    for (std::size_t j = 0; j < kChipBytes; ++j) cen[j] += chip[j];
    count[train.labels[i]] += 1;
  }
  for (std::size_t c = 0; c < centroid.size(); ++c)
    for (auto& v : centroid[c]) v /= std::max(1.0, count[c]);
  return centroid;
}

// Nearest class centroid restricted to the size x size window at (x0, y0),
// all channels. Returns accuracy on `test`.
inline double nearest_centroid_accuracy(const std::vector<std::vector<double>>& centroid, const ChipDataset& test,
                                        std::size_t x0, std::size_t y0, std::size_t size) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto chip = test.chip(i);
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t c = 0; c < centroid.size(); ++c) {
      double d = 0;
      for (std::size_t y = y0; y < y0 + size; ++y)
        for (std::size_t j = (y * kChipSide + x0) * 3; j < (y * kChipSide + x0 + size) * 3; ++j) {
          const double e = chip[j] - centroid[c][j];
          d += e * e;
        }
      if (d < best_d) best_d = d, best = c;
    }
    correct += best == test.labels[i];
  }
  return double(correct) / double(test.size());
}

inline double nearest_centroid_accuracy(const ChipDataset& train, const ChipDataset& test, std::size_t x0,
                                        std::size_t y0, std::size_t size) {
  return nearest_centroid_accuracy(class_centroids(train), test, x0, y0, size);
}

// Best accuracy over every window position (stride 1).
inline double best_window_accuracy(const ChipDataset& train, const ChipDataset& test, std::size_t size) {
  const auto centroid = class_centroids(train);
  double best = 0.0;
  for (std::size_t y = 0; y + size <= kChipSide; ++y)
    for (std::size_t x = 0; x + size <= kChipSide; ++x)
      best = std::max(best, nearest_centroid_accuracy(centroid, test, x, y, size));
  return best;
}

// Worst accuracy over all window positions of a nearest-centroid classifier
// on one local statistic: the lag-1 autocovariance of channel-mean values.
inline double window_texture_accuracy(const ChipDataset& train, const ChipDataset& test, std::size_t size) {
  auto feature = [&](const ChipDataset& ds, std::size_t i, std::size_t x0, std::size_t y0) {
    const auto chip = ds.chip(i);
    auto gray = [&](std::size_t x, std::size_t y) {
      const std::size_t p = (y * kChipSide + x) * 3;
      return (double(chip[p]) + chip[p + 1] + chip[p + 2]) / 3.0 - 128.0;
    };
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t y = y0; y < y0 + size; ++y)
      for (std::size_t x = x0; x < x0 + size; ++x) {
        if (x + 1 < x0 + size) sum += gray(x, y) * gray(x + 1, y), ++n;
        if (y + 1 < y0 + size) sum += gray(x, y) * gray(x, y + 1), ++n;
      }
    return sum / double(n);
  };
  const std::size_t k = train.num_classes();
  double worst = 1.0;
  for (std::size_t y0 = 0; y0 + size <= kChipSide; ++y0)
    for (std::size_t x0 = 0; x0 + size <= kChipSide; ++x0) {
      std::vector<double> mean(k, 0.0), count(k, 0.0);
      for (std::size_t i = 0; i < train.size(); ++i) {
        mean[train.labels[i]] += feature(train, i, x0, y0);
        count[train.labels[i]] += 1;
      }
      for (std::size_t c = 0; c < k; ++c) mean[c] /= std::max(1.0, count[c]);
      std::size_t correct = 0;
      for (std::size_t i = 0; i < test.size(); ++i) {
        const double e = feature(test, i, x0, y0);
        std::size_t best = 0;
        for (std::size_t c = 1; c < k; ++c)
          if (std::abs(e - mean[c]) < std::abs(e - mean[best])) best = c;
        correct += best == test.labels[i];
      }
      worst = std::min(worst, double(correct) / double(test.size()));
    }
  return worst;
}

}  // namespace twospeed::oracle
