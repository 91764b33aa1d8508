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
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <unordered_set>
#include <vector>

#include "twospeed/data.hpp"
#include "twospeed/models.hpp"
#include "twospeed/optim.hpp"
#include "twospeed/random.hpp"
#include "twospeed/table.hpp"

namespace twospeed {

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> val_accuracy;  // absent when the validation view is empty

  bool operator==(const EpochRecord&) const = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  double duration_seconds = 0.0;
  std::uint64_t samples_trained = 0;
  std::uint64_t samples_evaluated = 0;
};

enum class LrSchedule { constant, cosine };

struct TrainOptions {
  std::size_t epochs = 10;
  double learning_rate = 1e-3;
  // cosine: per step, lr * (1 + cos(pi * step / total_steps)) / 2.
  LrSchedule lr_schedule = LrSchedule::constant;
  std::size_t batch_size = 64;
  double weight_decay = 0.0;  // decoupled, on parameters flagged for decay
  bool augment = true;
  AugmentPolicy policy;
  // Seconds on some monotonic clock; steady_clock when empty.
  std::function<double()> clock;
  // Called after every epoch; returning false stops training early.
  std::function<bool(const EpochRecord&)> on_epoch;

  void validate() const {
    if (epochs == 0) throw ParameterError("epochs must be at least 1");
    if (batch_size == 0) throw ParameterError("batch_size must be at least 1");
    if (!(learning_rate >= 0.0 && std::isfinite(learning_rate)))
      throw ParameterError("learning rate must be finite and nonnegative");
    if (!(weight_decay >= 0.0 && std::isfinite(weight_decay)))
      throw ParameterError("weight decay must be finite and nonnegative");
    policy.validate();
  }
};

template <typename T>
struct TrainResult {
  Model<T> model;
  TrainHistory history;
};

// Copies chips into a [B x 3 x 32 x 32] tensor scaled to [0,1], optionally
// augmenting the bytes first.
template <typename T>
Tensor<T> assemble_batch(const ChipDataset& ds, std::span<const std::uint32_t> indices,
                         const AugmentPolicy* policy = nullptr, Rng* rng = nullptr) {
  if (indices.empty()) throw InputError("empty batch");
  std::vector<std::uint8_t> bytes(indices.size() * kChipBytes);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= ds.size()) throw InputError("sample index " + std::to_string(indices[b]) + " out of range");
    const auto chip = ds.chip(indices[b]);
    std::copy(chip.begin(), chip.end(), bytes.begin() + std::ptrdiff_t(b * kChipBytes));
  }
  if (policy) augment_batch(bytes, *policy, *rng);
  Tensor<T> x(Shape{indices.size(), kChipChannels, kChipSide, kChipSide});
  T* out = x.ptr();
  const T inv = T(1.0 / 255.0);
  for (std::size_t b = 0; b < indices.size(); ++b)
    for (std::size_t p = 0; p < kChipPixels; ++p)
      for (std::size_t c = 0; c < kChipChannels; ++c)
        out[(b * kChipChannels + c) * kChipPixels + p] = T(bytes[b * kChipBytes + p * 3 + c]) * inv;
  return x;
}

// Eval-mode class probabilities for the listed samples.
template <typename T>
ProbabilityTable predict_probabilities(const Model<T>& model, const ChipDataset& ds,
                                       std::span<const std::uint32_t> indices, std::size_t batch_size = 256) {
  Model<T> m = model;  // shares parameters; only the mode differs
  m.set_mode(ops::Mode::eval);
  ProbabilityTable table(indices.size(), model.num_classes());
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    Tensor<T> probs = m.forward(assemble_batch<T>(ds, chunk));
    for (std::size_t i = 0; i < probs.size(); ++i) table.values[start * table.cols + i] = double(probs[i]);
  }
  return table;
}

template <typename T>
double accuracy_on(const Model<T>& model, const ChipDataset& ds, std::span<const std::uint32_t> indices) {
  if (indices.empty()) throw InputError("accuracy on an empty view");
  const auto pred = argmax_rows(predict_probabilities(model, ds, indices));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) correct += pred[i] == int(ds.labels[indices[i]]);
  return double(correct) / double(indices.size());
}

// Trains a copy of `initial` with Adam on shuffled mini-batches. Training
// batches are augmented; validation is not. The result is in eval mode.
template <typename T>
TrainResult<T> train_model(const Model<T>& initial, const ChipDataset& ds, std::span<const std::uint32_t> train,
                           std::span<const std::uint32_t> val, const TrainOptions& options, Rng& rng) {
  options.validate();
  if (train.empty()) throw InputError("training view is empty");
  {
    std::unordered_set<std::uint32_t> seen(train.begin(), train.end());
    for (auto i : val)
      if (seen.count(i)) throw InputError("sample " + std::to_string(i) + " is in both train and val views");
  }
  if (ds.num_classes() != initial.num_classes())
    throw InputError("dataset has " + std::to_string(ds.num_classes()) + " classes, model expects " +
                     std::to_string(initial.num_classes()));
  auto clock = options.clock ? options.clock : [] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
  };
  const double start = clock();

  TrainResult<T> result{initial.clone(), {}};
  Model<T>& model = result.model;
  model.set_mode(ops::Mode::train);
  std::vector<Tensor<T>> params;
  std::vector<bool> decay;
  for (auto& p : model.parameters()) {
    p.value.set_requires_grad(true);
    params.push_back(p.value);
    decay.push_back(p.decay);
  }
  OptimizerState<T> state(params, options.learning_rate, options.weight_decay, decay);

  const std::uint64_t run_seed = rng();
  const std::size_t steps_per_epoch = (train.size() + options.batch_size - 1) / options.batch_size;
  const double total_steps = double(steps_per_epoch * options.epochs);
  std::size_t step = 0;
  std::vector<std::uint32_t> order(train.begin(), train.end());
  std::vector<std::int32_t> labels;
  for (std::size_t epoch = 1; epoch <= options.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(run_seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b0 = 0, batch = 0; b0 < order.size(); b0 += options.batch_size, ++batch) {
      const std::span<const std::uint32_t> idx(order.data() + b0, std::min(options.batch_size, order.size() - b0));
      Rng batch_rng(derive_seed(run_seed, (std::uint64_t(epoch) << 32) | batch));
      Tensor<T> x = assemble_batch<T>(ds, idx, options.augment ? &options.policy : nullptr, &batch_rng);
      labels.resize(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) labels[i] = ds.labels[idx[i]];
      Tape<T> tape;
      Tensor<T> logits, loss;
      {
        TapeScope<T> scope(tape);
        logits = model.logits(x, &batch_rng);
        loss = ops::cross_entropy(logits, std::span<const std::int32_t>(labels));
      }
      tape.backward(loss);
      if (options.lr_schedule == LrSchedule::cosine)
        state.learning_rate = options.learning_rate * 0.5 * (1.0 + std::cos(M_PI * double(step) / total_steps));
      ++step;
      adam_step(params, state);
      for (auto& p : params) p.zero_grad();
      loss_sum += double(loss.item()) * double(idx.size());
      const std::size_t k = model.num_classes();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const T* row = logits.ptr() + i * k;
        correct += std::size_t(std::max_element(row, row + k) - row) == std::size_t(labels[i]);
      }
      result.history.samples_trained += idx.size();
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / double(order.size());
    rec.train_accuracy = double(correct) / double(order.size());
    if (!val.empty()) {
      model.set_mode(ops::Mode::eval);
      rec.val_accuracy = accuracy_on(model, ds, val);
      model.set_mode(ops::Mode::train);
      result.history.samples_evaluated += val.size();
    }
    result.history.epochs.push_back(rec);
    if (options.on_epoch && !options.on_epoch(rec)) break;
  }
  model.set_mode(ops::Mode::eval);
  for (auto& p : model.parameters()) p.value.zero_grad();
  result.history.duration_seconds = std::max(0.0, clock() - start);
  return result;
}

}  // namespace twospeed
