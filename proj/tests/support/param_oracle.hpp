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

// Closed-form parameter counts, written from the layer lists alone.

#include <cstdint>
#include <vector>

namespace twospeed::oracle {

inline std::uint64_t dense_params(std::uint64_t din, std::uint64_t dout) { return din * dout + dout; }
inline std::uint64_t conv3_params(std::uint64_t cin, std::uint64_t cout) { return 9 * cin * cout + cout; }
inline std::uint64_t norm_params(std::uint64_t d) { return 2 * d; }

struct CnnLayers {
  std::uint64_t widths[3][2];
  std::vector<std::uint64_t> dense;
  std::uint64_t classes;
  std::uint64_t side;
};

inline std::uint64_t cnn_params(const CnnLayers& s) {
  std::uint64_t total = 0, in = 3;
  for (const auto& b : s.widths) {
    total += conv3_params(in, b[0]) + conv3_params(b[0], b[1]);
    in = b[1];
  }
  std::uint64_t din = in * (s.side / 8) * (s.side / 8);
  for (auto d : s.dense) total += dense_params(din, d), din = d;
  return total + dense_params(din, s.classes);
}

inline std::uint64_t vit_params(std::uint64_t image, std::uint64_t patch, std::uint64_t d, std::uint64_t mlp,
                                std::uint64_t layers, std::uint64_t classes) {
  const std::uint64_t tokens = (image / patch) * (image / patch) + 1;
  std::uint64_t total = dense_params(3 * patch * patch, d) + d + tokens * d;
  const std::uint64_t layer = norm_params(d) + 4 * dense_params(d, d) + norm_params(d) + dense_params(d, mlp) +
                              dense_params(mlp, d);
  total += layers * layer;
  return total + norm_params(d) + dense_params(d, classes);
}

}  // namespace twospeed::oracle
