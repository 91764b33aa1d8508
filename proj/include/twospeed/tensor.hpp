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
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "twospeed/errors.hpp"

namespace twospeed {

// Dimension sizes of a dense row-major tensor. All dimensions are positive.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<std::size_t> dims) : dims_(dims) { validate(); }
  explicit Shape(std::vector<std::size_t> dims) : dims_(std::move(dims)) { validate(); }

  std::size_t rank() const { return dims_.size(); }
  std::size_t operator[](std::size_t i) const { return dims_.at(i); }
  std::size_t back() const { return dims_.back(); }
  const std::vector<std::size_t>& dims() const { return dims_; }

  std::size_t numel() const {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>());
  }

  // Product of all dimensions except the last.
  std::size_t rows() const { return dims_.empty() ? 1 : numel() / dims_.back(); }

  bool operator==(const Shape& other) const = default;

  std::string str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
    os << ']';
    return os.str();
  }

 private:
  void validate() const {
    for (auto d : dims_)
      if (d == 0) throw ShapeError("zero-sized dimension in " + str());
  }

  std::vector<std::size_t> dims_;
};

template <typename T>
class Tape;

// A shared handle to dense tensor storage. Copies of a Tensor alias the same
// buffer; use clone() for an independent value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape) : impl_(std::make_shared<Impl>()) {
    impl_->data.assign(shape.numel(), T{0});
    impl_->shape = std::move(shape);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t(std::move(shape));
    t.set_requires_grad(requires_grad);
    return t;
  }

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : impl_(std::make_shared<Impl>()) {
    if (data.size() != shape.numel())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape.str());
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t size() const { return impl_->data.size(); }

  std::span<T> data() { return impl_->data; }
  std::span<const T> data() const { return impl_->data; }
  T* ptr() { return impl_->data.data(); }
  const T* ptr() const { return impl_->data.data(); }
  T& operator[](std::size_t i) { return impl_->data[i]; }
  const T& operator[](std::size_t i) const { return impl_->data[i]; }

  T item() const {
    if (size() != 1) throw UsageError("item() on a tensor of shape " + shape().str());
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag) { impl_->requires_grad = flag; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<T> grad() {
    ensure_grad();
    return impl_->grad;
  }
  std::span<const T> grad() const { return impl_->grad; }
  void ensure_grad() const {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), T{0});
  }
  // Mutable gradient storage through any handle to this tensor, allocated on
  // first use. Backward rules accumulate through this.
  std::span<T> grad_buffer() const {
    ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  Tensor clone() const {
    Tensor out(shape(), std::vector<T>(impl_->data.begin(), impl_->data.end()), requires_grad());
    return out;
  }

  // Same bytes, new shape, detached from any tape.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), std::vector<T>(impl_->data.begin(), impl_->data.end()));
  }

 private:
  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };

  std::shared_ptr<Impl> impl_;
};

// Records differentiable operations in execution order. Each entry owns the
// closure that propagates the output gradient back to its inputs, so entries
// are already in topological order and a reverse sweep visits each once.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(Tensor<T> output, std::vector<Tensor<T>> inputs, std::function<void()> backward) {
    nodes_.push_back(Node{std::move(output), std::move(inputs), std::move(backward)});
  }

  std::size_t size() const { return nodes_.size(); }

  // True when every node's inputs were produced by an earlier node or are leaves.
  bool is_topological() const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (const auto& in : nodes_[i].inputs)
        for (std::size_t j = i; j < nodes_.size(); ++j)
          if (nodes_[j].output.same(in)) return false;
    return true;
  }

  // Populates gradients of every requires_grad tensor reachable from loss.
  // Returns the number of nodes whose backward rule ran.
  std::size_t backward(Tensor<T> loss) {
    if (loss.size() != 1) throw UsageError("backward requires a scalar loss, got " + loss.shape().str());
    if (consumed_) throw UsageError("tape already replayed");
    consumed_ = true;
    loss.ensure_grad();
    loss.grad()[0] += T{1};
    std::size_t visited = 0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      if (!it->output.has_grad()) continue;
      it->backward();
      ++visited;
    }
    return visited;
  }

 private:
  struct Node {
    Tensor<T> output;
    std::vector<Tensor<T>> inputs;
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {
template <typename T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}
}  // namespace detail

// Makes `tape` the recording target for operations on this thread while in scope.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(detail::active_tape<T>()) {
    detail::active_tape<T>() = &tape;
  }
  ~TapeScope() { detail::active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

template <typename T>
void backward(Tensor<T> loss, Tape<T>& tape) {
  tape.backward(std::move(loss));
}

}  // namespace twospeed
