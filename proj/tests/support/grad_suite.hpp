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

// Finite-difference cases for every differentiable op and two composed
// blocks. Each case draws fresh inputs from a seed and returns the worst
// relative error over all of its inputs.

#include <algorithm>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "test_util.hpp"
#include "twospeed/gradcheck.hpp"
#include "twospeed/ops.hpp"

namespace twospeed::grad_suite {

using Td = Tensor<double>;

struct Case {
  std::string name;
  std::function<double(std::uint64_t seed)> run;
};

inline Td rand(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  return twospeed::testing::random_tensor<double>(std::move(s), rng, lo, hi);
}

// Weighted sum so every output element gets its own upstream gradient.
inline Td probe(const Td& y, std::mt19937_64& rng) {
  Td w = rand(y.shape(), rng);
  return ops::sum(ops::mul(y, w));
}

template <typename F>
double check_all(F&& f, std::initializer_list<Td> inputs, double h = 1e-5) {
  double worst = 0.0;
  for (const auto& x : inputs) worst = std::max(worst, finite_diff_check(f, x, h));
  return worst;
}

// Mostly away from zero so that relu kinks sit far outside the FD step.
inline Td rand_away_from_zero(Shape s, std::mt19937_64& rng) {
  Td t = rand(std::move(s), rng);
  for (auto& v : t.data()) v = v < 0 ? v - 0.05 : v + 0.05;
  return t;
}

inline std::vector<Case> op_cases() {
  std::vector<Case> c;
  c.push_back({"matmul", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td a = rand({3, 4}, r), b = rand({4, 5}, r), w = rand({3, 5}, r);
                 return check_all([&] { return ops::sum(ops::mul(ops::matmul(a, b), w)); }, {a, b});
               }});
  c.push_back({"linear", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({2, 3, 4}, r), w = rand({4, 5}, r), b = rand({5}, r), p = rand({2, 3, 5}, r);
                 return check_all([&] { return ops::sum(ops::mul(ops::linear(x, w, b), p)); }, {x, w, b});
               }});
  c.push_back({"add_broadcast", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td a = rand({2, 3, 4}, r), b = rand({3, 4}, r), p = rand({2, 3, 4}, r);
                 return check_all([&] { return ops::sum(ops::mul(ops::add(a, b), p)); }, {a, b});
               }});
  c.push_back({"mul", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td a = rand({3, 4}, r), b = rand({3, 4}, r), p = rand({3, 4}, r);
                 return check_all([&] { return ops::sum(ops::mul(ops::mul(a, b), p)); }, {a, b});
               }});
  c.push_back({"scale_sum", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({5}, r);
                 return check_all([&] { return ops::sum(ops::mul(ops::scale(x, -1.7), x)); }, {x});
               }});
  c.push_back({"reshape", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({2, 6}, r), p = rand({3, 4}, r);
                 return check_all([&] { return ops::sum(ops::mul(ops::reshape(x, Shape{3, 4}), p)); }, {x});
               }});
  c.push_back({"relu", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand_away_from_zero({4, 5}, r);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::relu(x), q); }, {x}, 1e-6);
               }});
  c.push_back({"gelu", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({4, 5}, r, -3.0, 3.0);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::gelu(x), q); }, {x});
               }});
  c.push_back({"softmax", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({3, 6}, r, -2.0, 2.0);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::softmax(x), q); }, {x});
               }});
  c.push_back({"layer_norm", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({3, 6}, r, -2.0, 2.0), g = rand({6}, r), b = rand({6}, r);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::layer_norm(x, g, b), q); }, {x, g, b});
               }});
  c.push_back({"dropout", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({4, 6}, r);
                 const auto seed = r();
                 return check_all(
                     [&] {
                       std::mt19937_64 mask(seed);  // same mask on every call
                       std::mt19937_64 q(seed + 1);
                       return probe(ops::dropout(x, 0.3, ops::Mode::train, mask), q);
                     },
                     {x});
               }});
  c.push_back({"cross_entropy", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({4, 5}, r, -3.0, 3.0);
                 std::vector<std::int32_t> labels;
                 for (int i = 0; i < 4; ++i) labels.push_back(std::int32_t(r() % 5));
                 return check_all([&] { return ops::cross_entropy(x, std::span<const std::int32_t>(labels)); }, {x});
               }});
  c.push_back({"conv2d", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({2, 2, 5, 4}, r), k = rand({3, 2, 3, 3}, r), b = rand({3}, r);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::conv2d(x, k, b), q); }, {x, k, b});
               }});
  c.push_back({"maxpool2d", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({2, 2, 4, 6}, r);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::maxpool2d(x), q); }, {x}, 1e-6);
               }});
  c.push_back({"patchify", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({2, 3, 4, 4}, r);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 q(seed); return probe(ops::patchify(x, 2), q); }, {x});
               }});
  c.push_back({"prepend_select_token", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td x = rand({2, 3, 4}, r), tok = rand({4}, r);
                 const auto seed = r();
                 return check_all(
                     [&] {
                       std::mt19937_64 q(seed);
                       auto y = ops::prepend_token(x, tok);
                       return ops::add(probe(ops::select_token(y, 0), q), probe(ops::select_token(y, 2), q));
                     },
                     {x, tok});
               }});
  c.push_back({"attention", [](std::uint64_t s) {
                 std::mt19937_64 r(s);
                 Td q = rand({2, 3, 4}, r), k = rand({2, 3, 4}, r), v = rand({2, 3, 4}, r);
                 const auto seed = r();
                 return check_all([&] { std::mt19937_64 g(seed); return probe(ops::attention(q, k, v, 2), g); }, {q, k, v});
               }});
  return c;
}

// conv-relu-conv-relu-pool, flatten, dense head, cross-entropy.
inline double cnn_block(std::uint64_t s) {
  std::mt19937_64 r(s);
  Td x = rand({2, 3, 4, 4}, r);
  Td k1 = rand({4, 3, 3, 3}, r, -0.5, 0.5), b1 = rand({4}, r, 0.05, 0.2);
  Td k2 = rand({4, 4, 3, 3}, r, -0.5, 0.5), b2 = rand({4}, r, 0.05, 0.2);
  Td w = rand({16, 3}, r), b = rand({3}, r);
  std::vector<std::int32_t> labels{std::int32_t(r() % 3), std::int32_t(r() % 3)};
  auto f = [&] {
    auto h = ops::relu(ops::conv2d(x, k1, b1));
    h = ops::maxpool2d(ops::relu(ops::conv2d(h, k2, b2)));
    return ops::cross_entropy(ops::linear(ops::reshape(h, Shape{2, 16}), w, b), std::span<const std::int32_t>(labels));
  };
  return check_all(f, {x, k1, b1, k2, b2, w, b}, 1e-6);
}

// Pre-norm encoder layer on patch tokens with a class token, then a head.
inline double transformer_block(std::uint64_t s) {
  std::mt19937_64 r(s);
  const std::size_t d = 4, mlp = 6, classes = 3;
  Td img = rand({2, 1, 4, 4}, r);
  Td we = rand({4, d}, r), be = rand({d}, r), cls = rand({d}, r), pos = rand({5, d}, r);
  Td g1 = rand({d}, r, 0.5, 1.5), n1 = rand({d}, r, -0.2, 0.2);
  Td wq = rand({d, d}, r), wk = rand({d, d}, r), wv = rand({d, d}, r), wo = rand({d, d}, r);
  Td bq = rand({d}, r), bk = rand({d}, r), bv = rand({d}, r), bo = rand({d}, r);
  Td g2 = rand({d}, r, 0.5, 1.5), n2 = rand({d}, r, -0.2, 0.2);
  Td w1 = rand({d, mlp}, r), b1 = rand({mlp}, r), w2 = rand({mlp, d}, r), b2 = rand({d}, r);
  Td wh = rand({d, classes}, r), bh = rand({classes}, r);
  std::vector<std::int32_t> labels{std::int32_t(r() % classes), std::int32_t(r() % classes)};
  auto f = [&] {
    auto t = ops::add(ops::prepend_token(ops::linear(ops::patchify(img, 2), we, be), cls), pos);
    auto a = ops::layer_norm(t, g1, n1);
    auto att = ops::attention(ops::linear(a, wq, bq), ops::linear(a, wk, bk), ops::linear(a, wv, bv), 2);
    t = ops::add(t, ops::linear(att, wo, bo));
    auto m = ops::linear(ops::gelu(ops::linear(ops::layer_norm(t, g2, n2), w1, b1)), w2, b2);
    t = ops::add(t, m);
    return ops::cross_entropy(ops::linear(ops::select_token(t, 0), wh, bh), std::span<const std::int32_t>(labels));
  };
  return check_all(f, {img, we, be, cls, pos, g1, n1, wq, wk, wv, wo, bq, bk, bv, bo, g2, n2, w1, b1, w2, b2, wh, bh});
}

inline std::vector<Case> all_cases() {
  auto c = op_cases();
  c.push_back({"cnn_block", cnn_block});
  c.push_back({"transformer_block", transformer_block});
  return c;
}

inline constexpr int kSeeds = 20;
inline constexpr double kTolerance = 1e-4;

}  // namespace twospeed::grad_suite
