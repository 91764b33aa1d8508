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

#include <algorithm>
#include <cmath>

#include "twospeed/tensor.hpp"

namespace twospeed {

// Compares the taped gradient of the scalar function `f` with respect to `x`
// against central differences with step h. `f` must read x's current values
// on every call. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
template <typename T, typename F>
double finite_diff_check(F&& f, Tensor<T> x, T h) {
  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<T> analytic;
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f();
    tape.backward(loss);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  x.zero_grad();
  x.set_requires_grad(had_flag);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = saved + h;
    const double plus = double(f().item());
    x[i] = saved - h;
    const double minus = double(f().item());
    x[i] = saved;
    const double numeric = (plus - minus) / (2.0 * double(h));
    worst = std::max(worst, std::abs(double(analytic[i]) - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace twospeed
