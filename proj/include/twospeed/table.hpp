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

#include <cstddef>
#include <span>
#include <vector>

#include "twospeed/errors.hpp"

namespace twospeed {

// Row-major matrix of per-sample class probabilities.
struct ProbabilityTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  ProbabilityTable() = default;
  ProbabilityTable(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}

  std::span<double> row(std::size_t i) { return std::span<double>(values).subspan(i * cols, cols); }
  std::span<const double> row(std::size_t i) const { return std::span<const double>(values).subspan(i * cols, cols); }

  bool operator==(const ProbabilityTable&) const = default;
};

// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw InputError("argmax of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

inline std::vector<int> argmax_rows(const ProbabilityTable& t) {
  std::vector<int> out(t.rows);
  for (std::size_t i = 0; i < t.rows; ++i) out[i] = int(argmax(t.row(i)));
  return out;
}

}  // namespace twospeed
