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
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "twospeed/tensor.hpp"

// Differentiable tensor operations. Every op computes its output eagerly and,
// when a tape is active on this thread and any input requires a gradient,
// records a backward rule that accumulates into the inputs' gradients.
namespace twospeed::ops {

enum class Mode { train, eval };
enum class Activation { relu, gelu };

namespace detail {

// Records `fn` on the active tape if one exists and some input needs a gradient.
template <typename T, typename Fn>
void record(Tensor<T>& out, std::vector<Tensor<T>> inputs, Fn&& fn) {
  Tape<T>* tape = twospeed::detail::active_tape<T>();
  if (!tape) return;
  bool needed = false;
  for (const auto& in : inputs) needed = needed || (in.defined() && in.requires_grad());
  if (!needed) return;
  out.set_requires_grad(true);
  tape->record(out, std::move(inputs), std::forward<Fn>(fn));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m x n] (+)= op(A) * op(B) on row-major buffers. op(A) is m x k, op(B) is k x n.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a,
          const T* b, T* c, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Eigen::Map<RowMat<T>> C(c, Eigen::Index(m), Eigen::Index(n));
  const Map A(a, Eigen::Index(trans_a ? k : m), Eigen::Index(trans_a ? m : k));
  const Map B(b, Eigen::Index(trans_b ? n : k), Eigen::Index(trans_b ? k : n));
  if (!accumulate) C.setZero();
  if (!trans_a && !trans_b)
    C.noalias() += A * B;
  else if (trans_a && !trans_b)
    C.noalias() += A.transpose() * B;
  else if (!trans_a && trans_b)
    C.noalias() += A * B.transpose();
  else
    C.noalias() += A.transpose() * B.transpose();
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

}  // namespace detail

// Standard matrix product of rank-2 tensors.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape().rank() == 2 && b.shape().rank() == 2,
                  "matmul expects rank-2 operands, got " + a.shape().str() + " and " + b.shape().str());
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  detail::require(b.shape()[0] == k, "matmul inner dimensions differ: " + a.shape().str() + " vs " +
                                         b.shape().str());
  Tensor<T> out(Shape{m, n});
  detail::gemm<T>(false, false, m, n, k, a.ptr(), b.ptr(), out.ptr(), false);
  detail::record(out, {a, b}, [a, b, out, m, n, k]() mutable {
    const T* g = out.grad_buffer().data();
    if (a.requires_grad()) detail::gemm<T>(false, true, m, k, n, g, b.ptr(), a.grad_buffer().data(), true);
    if (b.requires_grad()) detail::gemm<T>(true, false, k, n, m, a.ptr(), g, b.grad_buffer().data(), true);
  });
  return out;
}

// x[..., d_in] * weight[d_in, d_out] + bias[d_out], applied over all leading dims.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require(weight.shape().rank() == 2, "linear weight must be rank 2");
  const std::size_t din = weight.shape()[0], dout = weight.shape()[1];
  detail::require(x.shape().back() == din,
                  "linear input " + x.shape().str() + " does not match weight " + weight.shape().str());
  detail::require(!bias.defined() || bias.size() == dout, "linear bias length mismatch");
  const std::size_t rows = x.shape().rows();
  auto dims = x.shape().dims();
  dims.back() = dout;
  Tensor<T> out{Shape(dims)};
  detail::gemm<T>(false, false, rows, dout, din, x.ptr(), weight.ptr(), out.ptr(), false);
  if (bias.defined()) {
    T* o = out.ptr();
    const T* bv = bias.ptr();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < dout; ++j) o[r * dout + j] += bv[j];
  }
  detail::record(out, {x, weight, bias}, [x, weight, bias, out, rows, din, dout]() mutable {
    const T* g = out.grad_buffer().data();
    if (x.requires_grad()) detail::gemm<T>(false, true, rows, din, dout, g, weight.ptr(), x.grad_buffer().data(), true);
    if (weight.requires_grad())
      detail::gemm<T>(true, false, din, dout, rows, x.ptr(), g, weight.grad_buffer().data(), true);
    if (bias.defined() && bias.requires_grad()) {
      T* gb = bias.grad_buffer().data();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < dout; ++j) gb[j] += g[r * dout + j];
    }
  });
  return out;
}

// Elementwise a + b. b may also match a trailing block of a's dimensions, in
// which case it is added to every block.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto& ad = a.shape().dims();
  const auto& bd = b.shape().dims();
  bool suffix = bd.size() <= ad.size() && std::equal(bd.rbegin(), bd.rend(), ad.rbegin());
  detail::require(suffix, "add cannot broadcast " + b.shape().str() + " onto " + a.shape().str());
  const std::size_t block = b.size(), reps = a.size() / block;
  Tensor<T> out(a.shape());
  for (std::size_t r = 0; r < reps; ++r)
    for (std::size_t j = 0; j < block; ++j) out[r * block + j] = a[r * block + j] + b[j];
  detail::record(out, {a, b}, [a, b, out, block, reps]() mutable {
    auto g = out.grad_buffer();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t r = 0; r < reps; ++r)
        for (std::size_t j = 0; j < block; ++j) gb[j] += g[r * block + j];
    }
  });
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.shape() == b.shape(), "mul shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  detail::record(out, {a, b}, [a, b, out]() mutable {
    auto g = out.grad_buffer();
    if (a.requires_grad()) {
      auto ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * factor;
  detail::record(out, {x}, [x, out, factor]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factor;
  });
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (auto v : x.data()) total += v;
  Tensor<T> out = Tensor<T>::scalar(total);
  detail::record(out, {x}, [x, out]() mutable {
    const T g = out.grad_buffer()[0];
    for (auto& v : x.grad_buffer()) v += g;
  });
  return out;
}

// Differentiable reshape (copies).
template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  detail::require(shape.numel() == x.size(), "reshape " + x.shape().str() + " to " + shape.str());
  Tensor<T> out = x.reshaped(std::move(shape));
  detail::record(out, {x}, [x, out]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

template <typename T>
T gelu_value(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * x * (T(1) + std::tanh(c * (x + T(0.044715) * x * x * x)));
}

template <typename T>
T gelu_derivative(T x) {
  const T c = T(std::sqrt(2.0 / std::numbers::pi));
  const T t = std::tanh(c * (x + T(0.044715) * x * x * x));
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * c * (T(1) + T(3 * 0.044715) * x * x);
}

// relu(x) = max(0, x); gelu uses the tanh approximation.
template <typename T>
Tensor<T> activation(const Tensor<T>& x, Activation kind) {
  Tensor<T> out(x.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = gelu_value(x[i]);
  }
  detail::record(out, {x}, [x, out, kind]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    if (kind == Activation::relu) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T(0)) gx[i] += g[i];
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * gelu_derivative(x[i]);
    }
  });
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return activation(x, Activation::relu);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  return activation(x, Activation::gelu);
}

// Softmax over the last axis, stabilized by subtracting the row maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  const std::size_t n = x.shape().back(), rows = x.shape().rows();
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * n;
    T* o = out.ptr() + r * n;
    T mx = *std::max_element(in, in + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  detail::record(out, {x}, [x, out, n, rows]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * out[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += out[r * n + j] * (g[r * n + j] - dot);
    }
  });
  return out;
}

// Normalizes each vector along the last axis to zero mean / unit variance, then
// applies gamma * x + beta.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back(), rows = x.shape().rows();
  detail::require(d >= 2, "layer_norm needs at least 2 features");
  detail::require(gamma.size() == d && beta.size() == d, "layer_norm affine length mismatch");
  Tensor<T> out(x.shape());
  std::vector<T> xhat(x.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.ptr() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= T(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(d);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[j] - mean) * rstd[r];
      out[r * d + j] = gamma[j] * xhat[r * d + j] + beta[j];
    }
  }
  detail::record(out, {x, gamma, beta},
                 [x, gamma, beta, out, xhat = std::move(xhat), rstd = std::move(rstd), d, rows]() mutable {
                   auto g = out.grad_buffer();
                   if (gamma.requires_grad() || beta.requires_grad()) {
                     auto gg = gamma.requires_grad() ? gamma.grad_buffer() : std::span<T>{};
                     auto gb = beta.requires_grad() ? beta.grad_buffer() : std::span<T>{};
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t j = 0; j < d; ++j) {
                         if (!gg.empty()) gg[j] += g[r * d + j] * xhat[r * d + j];
                         if (!gb.empty()) gb[j] += g[r * d + j];
                       }
                   }
                   if (!x.requires_grad()) return;
                   auto gx = x.grad_buffer();
                   std::vector<T> dxhat(d);
                   for (std::size_t r = 0; r < rows; ++r) {
                     T mean_d{0}, mean_dx{0};
                     for (std::size_t j = 0; j < d; ++j) {
                       dxhat[j] = g[r * d + j] * gamma[j];
                       mean_d += dxhat[j];
                       mean_dx += dxhat[j] * xhat[r * d + j];
                     }
                     mean_d /= T(d);
                     mean_dx /= T(d);
                     for (std::size_t j = 0; j < d; ++j)
                       gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                   }
                 });
  return out;
}

// Inverted dropout. Eval mode and rate 0 return x itself.
template <typename T, typename Rng>
Tensor<T> dropout(const Tensor<T>& x, double rate, Mode mode, Rng& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError("dropout rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - rate));
  std::vector<T> mask(x.size());
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (auto& m : mask) m = unif(rng) >= rate ? keep_scale : T(0);
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * mask[i];
  detail::record(out, {x}, [x, out, mask = std::move(mask)]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return out;
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  detail::require(logits.shape().rank() == 2, "cross_entropy expects [batch x classes] logits");
  const std::size_t batch = logits.shape()[0], n = logits.shape()[1];
  if (labels.size() != batch) throw InputError("label count does not match batch size");
  for (auto l : labels)
    if (l < 0 || std::size_t(l) >= n) throw InputError("label " + std::to_string(l) + " out of range");
  std::vector<T> probs(logits.size());
  T loss{0};
  for (std::size_t r = 0; r < batch; ++r) {
    const T* in = logits.ptr() + r * n;
    T mx = *std::max_element(in, in + n);
    T total{0};
    for (std::size_t j = 0; j < n; ++j) total += (probs[r * n + j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < n; ++j) probs[r * n + j] /= total;
    loss += (mx + std::log(total)) - in[labels[r]];
  }
  Tensor<T> out = Tensor<T>::scalar(loss / T(batch));
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  detail::record(out, {logits},
                 [logits, out, probs = std::move(probs), lab = std::move(lab), batch, n]() mutable {
                   const T g = out.grad_buffer()[0] / T(batch);
                   auto gl = logits.grad_buffer();
                   for (std::size_t r = 0; r < batch; ++r)
                     for (std::size_t j = 0; j < n; ++j)
                       gl[r * n + j] += g * (probs[r * n + j] - (std::size_t(lab[r]) == j ? T(1) : T(0)));
                 });
  return out;
}

namespace detail {
struct ImageDims {
  std::size_t batch, channels, height, width;
  bool batched;
};

inline ImageDims image_dims(const Shape& s, const char* op) {
  if (s.rank() == 3) return {1, s[0], s[1], s[2], false};
  if (s.rank() == 4) return {s[0], s[1], s[2], s[3], true};
  throw ShapeError(std::string(op) + " expects [C x H x W] or [N x C x H x W], got " + s.str());
}

inline Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.batch, c, h, w} : Shape{c, h, w};
}
}  // namespace detail

// 3x3 cross-correlation with same padding plus per-channel bias. Accepts a
// single image [C_in x H x W] or a batch [N x C_in x H x W].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias) {
  const auto d = detail::image_dims(x.shape(), "conv2d");
  const auto& ks = kernels.shape();
  detail::require(ks.rank() == 4 && ks[2] == 3 && ks[3] == 3, "conv2d kernels must be [C_out x C_in x 3 x 3]");
  detail::require(ks[1] == d.channels, "conv2d channel mismatch: input " + x.shape().str() + ", kernels " +
                                           ks.str());
  const std::size_t cout = ks[0], cin = d.channels, h = d.height, w = d.width, hw = h * w;
  const std::size_t kdim = cin * 9;
  detail::require(!bias.defined() || bias.size() == cout, "conv2d bias length mismatch");
  Tensor<T> out(detail::image_shape(d, cout, h, w));
  std::vector<T> cols(d.batch * kdim * hw);
  for (std::size_t n = 0; n < d.batch; ++n) {
    const T* img = x.ptr() + n * cin * hw;
    T* col = cols.data() + n * kdim * hw;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx) {
          T* row = col + (c * 9 + ky * 3 + kx) * hw;
          for (std::size_t y = 0; y < h; ++y) {
            const std::ptrdiff_t sy = std::ptrdiff_t(y + ky) - 1;
            if (sy < 0 || sy >= std::ptrdiff_t(h)) {
              std::fill(row + y * w, row + (y + 1) * w, T(0));
              continue;
            }
            const T* src = img + c * hw + std::size_t(sy) * w;
            for (std::size_t xx = 0; xx < w; ++xx) {
              const std::ptrdiff_t sx = std::ptrdiff_t(xx + kx) - 1;
              row[y * w + xx] = (sx < 0 || sx >= std::ptrdiff_t(w)) ? T(0) : src[sx];
            }
          }
        }
    T* o = out.ptr() + n * cout * hw;
    detail::gemm<T>(false, false, cout, hw, kdim, kernels.ptr(), col, o, false);
    if (bias.defined())
      for (std::size_t c = 0; c < cout; ++c)
        for (std::size_t i = 0; i < hw; ++i) o[c * hw + i] += bias[c];
  }
  detail::record(out, {x, kernels, bias},
                 [x, kernels, bias, out, cols = std::move(cols), d, cout, cin, h, w, hw, kdim]() mutable {
                   const T* g = out.grad_buffer().data();
                   std::vector<T> dcol(x.requires_grad() ? kdim * hw : 0);
                   for (std::size_t n = 0; n < d.batch; ++n) {
                     const T* gn = g + n * cout * hw;
                     if (kernels.requires_grad())
                       detail::gemm<T>(false, true, cout, kdim, hw, gn, cols.data() + n * kdim * hw,
                                       kernels.grad_buffer().data(), true);
                     if (bias.defined() && bias.requires_grad()) {
                       auto gb = bias.grad_buffer();
                       for (std::size_t c = 0; c < cout; ++c) {
                         T acc{0};
                         for (std::size_t i = 0; i < hw; ++i) acc += gn[c * hw + i];
                         gb[c] += acc;
                       }
                     }
                     if (!x.requires_grad()) continue;
                     detail::gemm<T>(true, false, kdim, hw, cout, kernels.ptr(), gn, dcol.data(), false);
                     T* gx = x.grad_buffer().data() + n * cin * hw;
                     for (std::size_t c = 0; c < cin; ++c)
                       for (std::size_t ky = 0; ky < 3; ++ky)
                         for (std::size_t kx = 0; kx < 3; ++kx) {
                           const T* row = dcol.data() + (c * 9 + ky * 3 + kx) * hw;
                           for (std::size_t y = 0; y < h; ++y) {
                             const std::ptrdiff_t sy = std::ptrdiff_t(y + ky) - 1;
                             if (sy < 0 || sy >= std::ptrdiff_t(h)) continue;
                             T* dst = gx + c * hw + std::size_t(sy) * w;
                             for (std::size_t xx = 0; xx < w; ++xx) {
                               const std::ptrdiff_t sx = std::ptrdiff_t(xx + kx) - 1;
                               if (sx >= 0 && sx < std::ptrdiff_t(w)) dst[sx] += row[y * w + xx];
                             }
                           }
                         }
                   }
                 });
  return out;
}

// 2x2 max pooling with stride 2. Gradient goes to the first maximal element of
// each window in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
  const auto d = detail::image_dims(x.shape(), "maxpool2d");
  if (d.height % 2 || d.width % 2) throw ShapeError("maxpool2d needs even spatial dims, got " + x.shape().str());
  const std::size_t oh = d.height / 2, ow = d.width / 2, planes = d.batch * d.channels;
  Tensor<T> out(detail::image_shape(d, d.channels, oh, ow));
  std::vector<std::uint32_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* in = x.ptr() + p * d.height * d.width;
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        std::size_t best = (2 * y) * d.width + 2 * xx;
        const std::size_t cand[3] = {best + 1, best + d.width, best + d.width + 1};
        for (auto c : cand)
          if (in[c] > in[best]) best = c;
        const std::size_t o = p * oh * ow + y * ow + xx;
        out[o] = in[best];
        argmax[o] = std::uint32_t(p * d.height * d.width + best);
      }
  }
  detail::record(out, {x}, [x, out, argmax = std::move(argmax)]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
  });
  return out;
}

// Splits [C x H x W] (or a batch [N x C x H x W]) into non-overlapping p x p
// patches in row-major patch order, each flattened channel-major:
// [(H/p * W/p) x (C p^2)] (or with a leading batch dimension).
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t p) {
  const auto d = detail::image_dims(x.shape(), "patchify");
  if (p == 0 || d.height % p || d.width % p)
    throw ShapeError("patch size " + std::to_string(p) + " does not divide " + x.shape().str());
  const std::size_t gh = d.height / p, gw = d.width / p, np = gh * gw, plen = d.channels * p * p;
  Tensor<T> out(d.batched ? Shape{d.batch, np, plen} : Shape{np, plen});
  // index[i] = source offset of output element i.
  std::vector<std::uint32_t> index(out.size());
  std::size_t i = 0;
  for (std::size_t n = 0; n < d.batch; ++n)
    for (std::size_t py = 0; py < gh; ++py)
      for (std::size_t px = 0; px < gw; ++px)
        for (std::size_t c = 0; c < d.channels; ++c)
          for (std::size_t y = 0; y < p; ++y)
            for (std::size_t xx = 0; xx < p; ++xx, ++i)
              index[i] = std::uint32_t(((n * d.channels + c) * d.height + py * p + y) * d.width + px * p + xx);
  for (std::size_t j = 0; j < index.size(); ++j) out[j] = x[index[j]];
  detail::record(out, {x}, [x, out, index = std::move(index)]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t j = 0; j < g.size(); ++j) gx[index[j]] += g[j];
  });
  return out;
}

// Inverse of patchify for a single image. Not differentiable.
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& patches, std::size_t channels, std::size_t height, std::size_t width,
                     std::size_t p) {
  if (p == 0 || height % p || width % p) throw ShapeError("patch size does not divide image");
  const std::size_t gh = height / p, gw = width / p;
  detail::require(patches.shape() == Shape{gh * gw, channels * p * p}, "unpatchify shape mismatch");
  Tensor<T> out(Shape{channels, height, width});
  std::size_t i = 0;
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < p; ++y)
          for (std::size_t xx = 0; xx < p; ++xx, ++i)
            out[(c * height + py * p + y) * width + px * p + xx] = patches[i];
  return out;
}

// [B x P x d] with token [d] -> [B x (P+1) x d], token first.
template <typename T>
Tensor<T> prepend_token(const Tensor<T>& x, const Tensor<T>& token) {
  detail::require(x.shape().rank() == 3 && token.size() == x.shape()[2], "prepend_token shape mismatch");
  const std::size_t b = x.shape()[0], p = x.shape()[1], dim = x.shape()[2];
  Tensor<T> out(Shape{b, p + 1, dim});
  for (std::size_t n = 0; n < b; ++n) {
    std::copy(token.ptr(), token.ptr() + dim, out.ptr() + n * (p + 1) * dim);
    std::copy(x.ptr() + n * p * dim, x.ptr() + (n + 1) * p * dim, out.ptr() + (n * (p + 1) + 1) * dim);
  }
  detail::record(out, {x, token}, [x, token, out, b, p, dim]() mutable {
    auto g = out.grad_buffer();
    if (token.requires_grad()) {
      auto gt = token.grad_buffer();
      for (std::size_t n = 0; n < b; ++n)
        for (std::size_t j = 0; j < dim; ++j) gt[j] += g[n * (p + 1) * dim + j];
    }
    if (x.requires_grad()) {
      auto gx = x.grad_buffer();
      for (std::size_t n = 0; n < b; ++n)
        for (std::size_t j = 0; j < p * dim; ++j) gx[n * p * dim + j] += g[(n * (p + 1) + 1) * dim + j];
    }
  });
  return out;
}

// [B x T x d] -> [B x d], taking token `index` of every sequence.
template <typename T>
Tensor<T> select_token(const Tensor<T>& x, std::size_t index) {
  detail::require(x.shape().rank() == 3 && index < x.shape()[1], "select_token out of range");
  const std::size_t b = x.shape()[0], t = x.shape()[1], dim = x.shape()[2];
  Tensor<T> out(Shape{b, dim});
  for (std::size_t n = 0; n < b; ++n)
    std::copy_n(x.ptr() + (n * t + index) * dim, dim, out.ptr() + n * dim);
  detail::record(out, {x}, [x, out, b, t, dim, index]() mutable {
    auto g = out.grad_buffer();
    auto gx = x.grad_buffer();
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t j = 0; j < dim; ++j) gx[(n * t + index) * dim + j] += g[n * dim + j];
  });
  return out;
}

// Scaled dot-product attention over `heads` heads. q, k, v are [B x T x d]
// (or [T x d]); each head uses a contiguous d/heads slice. If `probs` is given
// it receives the attention weights as [B x heads x T x T].
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    Tensor<T>* probs = nullptr) {
  detail::require(q.shape() == k.shape() && q.shape() == v.shape(), "attention q/k/v shapes differ");
  const auto& s = q.shape();
  detail::require(s.rank() == 2 || s.rank() == 3, "attention expects [T x d] or [B x T x d]");
  const std::size_t b = s.rank() == 3 ? s[0] : 1, t = s[s.rank() - 2], dim = s.back();
  if (heads == 0 || dim % heads) throw ShapeError("hidden size not divisible by head count");
  const std::size_t dh = dim / heads;
  const T inv = T(1) / std::sqrt(T(dh));
  Tensor<T> out(s);
  std::vector<T> p(b * heads * t * t);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t h = 0; h < heads; ++h) {
      T* ph = p.data() + (n * heads + h) * t * t;
      for (std::size_t i = 0; i < t; ++i) {
        const T* qi = q.ptr() + (n * t + i) * dim + h * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < t; ++j) {
          const T* kj = k.ptr() + (n * t + j) * dim + h * dh;
          T acc{0};
          for (std::size_t e = 0; e < dh; ++e) acc += qi[e] * kj[e];
          ph[i * t + j] = acc * inv;
          mx = std::max(mx, ph[i * t + j]);
        }
        T total{0};
        for (std::size_t j = 0; j < t; ++j) total += (ph[i * t + j] = std::exp(ph[i * t + j] - mx));
        for (std::size_t j = 0; j < t; ++j) ph[i * t + j] /= total;
        T* oi = out.ptr() + (n * t + i) * dim + h * dh;
        for (std::size_t j = 0; j < t; ++j) {
          const T w = ph[i * t + j];
          const T* vj = v.ptr() + (n * t + j) * dim + h * dh;
          for (std::size_t e = 0; e < dh; ++e) oi[e] += w * vj[e];
        }
      }
    }
  if (probs) *probs = Tensor<T>(Shape{b, heads, t, t}, p);
  detail::record(out, {q, k, v}, [q, k, v, out, p = std::move(p), b, t, dim, heads, dh, inv]() mutable {
    auto g = out.grad_buffer();
    auto gq = q.requires_grad() ? q.grad_buffer() : std::span<T>{};
    auto gk = k.requires_grad() ? k.grad_buffer() : std::span<T>{};
    auto gv = v.requires_grad() ? v.grad_buffer() : std::span<T>{};
    std::vector<T> dp(t), ds(t);
    for (std::size_t n = 0; n < b; ++n)
      for (std::size_t h = 0; h < heads; ++h) {
        const T* ph = p.data() + (n * heads + h) * t * t;
        for (std::size_t i = 0; i < t; ++i) {
          const T* gi = g.data() + (n * t + i) * dim + h * dh;
          T dot{0};
          for (std::size_t j = 0; j < t; ++j) {
            const T* vj = v.ptr() + (n * t + j) * dim + h * dh;
            T acc{0};
            for (std::size_t e = 0; e < dh; ++e) acc += gi[e] * vj[e];
            dp[j] = acc;
            dot += acc * ph[i * t + j];
            if (!gv.empty()) {
              T* gvj = gv.data() + (n * t + j) * dim + h * dh;
              for (std::size_t e = 0; e < dh; ++e) gvj[e] += ph[i * t + j] * gi[e];
            }
          }
          for (std::size_t j = 0; j < t; ++j) ds[j] = ph[i * t + j] * (dp[j] - dot) * inv;
          const T* qi = q.ptr() + (n * t + i) * dim + h * dh;
          for (std::size_t j = 0; j < t; ++j) {
            const T* kj = k.ptr() + (n * t + j) * dim + h * dh;
            if (!gq.empty()) {
              T* gqi = gq.data() + (n * t + i) * dim + h * dh;
              for (std::size_t e = 0; e < dh; ++e) gqi[e] += ds[j] * kj[e];
            }
            if (!gk.empty()) {
              T* gkj = gk.data() + (n * t + j) * dim + h * dh;
              for (std::size_t e = 0; e < dh; ++e) gkj[e] += ds[j] * qi[e];
            }
          }
        }
      }
  });
  return out;
}

}  // namespace twospeed::ops
