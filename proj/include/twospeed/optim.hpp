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
#include <span>
#include <utility>
#include <vector>

#include "twospeed/tensor.hpp"

namespace twospeed {

// Adam moments for a fixed list of parameters. `decay[i]` marks parameters
// that receive decoupled weight decay (the L2 penalty on dense layers).
template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> first_moment;
  std::vector<std::vector<T>> second_moment;
  std::vector<bool> decay;
  std::uint64_t step = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  OptimizerState() = default;

  OptimizerState(const std::vector<Tensor<T>>& params, double lr, double wd = 0.0,
                 std::vector<bool> decay_mask = {})
      : decay(std::move(decay_mask)), learning_rate(lr), weight_decay(wd) {
    if (decay.empty()) decay.assign(params.size(), wd > 0.0);
    if (decay.size() != params.size()) throw ShapeError("decay mask length differs from parameter count");
    for (const auto& p : params) {
      first_moment.emplace_back(p.size(), T{0});
      second_moment.emplace_back(p.size(), T{0});
    }
  }
};

// One bias-corrected Adam update with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps)) - lr * wd * p   (wd only where decay[i])
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<std::span<const T>>& grads,
               OptimizerState<T>& state) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size())
    throw ShapeError("adam_step: parameter, gradient and state counts differ");
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, double(state.step));
  const T b1 = T(state.beta1), b2 = T(state.beta2);
  const T lr = T(state.learning_rate), eps = T(state.epsilon);
  const T inv_c1 = T(1.0 / c1), inv_c2 = T(1.0 / c2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].data();
    const auto& g = grads[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    if (g.size() != p.size() || m.size() != p.size())
      throw ShapeError("adam_step: gradient/state length mismatch for parameter " + std::to_string(i));
    const T shrink = state.decay[i] ? T(state.learning_rate * state.weight_decay) : T(0);
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = b1 * m[j] + (T(1) - b1) * g[j];
      v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
      const T mhat = m[j] * inv_c1, vhat = v[j] * inv_c2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + eps) + shrink * p[j];
    }
  }
}

// Convenience wrapper reading gradients straight from the parameters; a
// parameter without a gradient is treated as having a zero gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, OptimizerState<T>& state) {
  std::vector<std::vector<T>> zeros(params.size());
  std::vector<std::span<const T>> grads;
  grads.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].has_grad()) {
      grads.emplace_back(std::as_const(params[i]).grad());
    } else {
      zeros[i].assign(params[i].size(), T{0});
      grads.emplace_back(zeros[i]);
    }
  }
  adam_step(params, grads, state);
}

}  // namespace twospeed
