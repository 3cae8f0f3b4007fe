// corrpool/ops.hpp

// Copyright 2026  The corrpool Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.

// Differentiable tensor operations. Every op reads its inputs from a Tape,
// records its output, and registers a backward rule that accumulates into the
// gradients of inputs that require them. Activations use the NHWC layout
// [N, T, F, C]: batch, time, frequency, channel.

#pragma once

#include <memory>

#include <Eigen/Dense>

#include "corrpool/tape.hpp"

namespace corrpool::ops {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

template <Real T>
CMapMat<T> as_mat(const Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return CMapMat<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}
template <Real T>
MapMat<T> as_mat(Tensor<T>& t, std::size_t rows, std::size_t cols) {
  return MapMat<T>(t.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (a != b)
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
inline std::tuple<std::size_t, std::size_t, std::size_t> split_axis(const Shape& s,
                                                                     std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  return {outer, s[axis], inner};
}


/// Extents of a "same"-padded 2D convolution over an NHWC batch.
struct ConvGeometry {
  std::size_t n, h, w, cin, ho, wo, kh, kw, sh, sw;
  std::ptrdiff_t top, left;
};

/// Moves data between an image [n, h, w, cin] and rows of its im2col matrix
/// [n * ho * wo, kh * kw * cin]. Only output lines (b, i) with b * ho + i in
/// [line0, line1) are handled, and `cols` points at the first of their rows.
/// With kToCols the rows are overwritten (padding becomes zero); otherwise
/// they are scatter-added back into the image.
template <typename T, bool kToCols>
void im2col_pass(const ConvGeometry& g, std::size_t line0, std::size_t line1, T* cols, T* image) {
  using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  const std::size_t kdim = g.kh * g.kw * g.cin;
  const auto len_of = [](std::ptrdiff_t v) { return static_cast<Eigen::Index>(v); };
  for (std::size_t line = line0; line < line1; ++line) {
      const std::size_t b = line / g.ho, i = line % g.ho;
      T* row0 = cols + (line - line0) * g.wo * kdim;
      for (std::size_t di = 0; di < g.kh; ++di) {
        const std::ptrdiff_t hi = static_cast<std::ptrdiff_t>(i * g.sh + di) - g.top;
        const bool row_ok = hi >= 0 && hi < static_cast<std::ptrdiff_t>(g.h);
        for (std::size_t dj = 0; dj < g.kw; ++dj) {
          // Output columns j whose input column j * sw + dj - left is inside the image.
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(dj) - g.left;
          const std::ptrdiff_t sw = static_cast<std::ptrdiff_t>(g.sw);
          std::ptrdiff_t lo = off >= 0 ? 0 : (-off + sw - 1) / sw;
          const std::ptrdiff_t last = static_cast<std::ptrdiff_t>(g.w) - 1 - off;
          std::ptrdiff_t hi_j = last < 0 ? 0 : last / sw + 1;
          hi_j = std::min<std::ptrdiff_t>(hi_j, static_cast<std::ptrdiff_t>(g.wo));
          if (!row_ok || hi_j <= lo) lo = hi_j = 0;
          T* tap = row0 + (di * g.kw + dj) * g.cin;
          Strided block(tap + lo * static_cast<std::ptrdiff_t>(kdim), len_of(hi_j - lo), len_of(static_cast<std::ptrdiff_t>(g.cin)),
                        Eigen::OuterStride<>(len_of(static_cast<std::ptrdiff_t>(kdim))));
          if constexpr (kToCols) {
            for (std::ptrdiff_t j = 0; j < lo; ++j) std::fill_n(tap + j * static_cast<std::ptrdiff_t>(kdim), g.cin, T(0));
            for (std::ptrdiff_t j = std::max(hi_j, lo); j < static_cast<std::ptrdiff_t>(g.wo); ++j)
              std::fill_n(tap + j * static_cast<std::ptrdiff_t>(kdim), g.cin, T(0));
          }
          if (hi_j <= lo) continue;
          T* src = image + ((b * g.h + static_cast<std::size_t>(hi)) * g.w +
                            static_cast<std::size_t>(lo * sw + off)) * g.cin;
          Strided img(src, len_of(hi_j - lo), len_of(static_cast<std::ptrdiff_t>(g.cin)),
                      Eigen::OuterStride<>(len_of(sw * static_cast<std::ptrdiff_t>(g.cin))));
          if constexpr (kToCols) block = img;
          else img += block;
        }
      }
    }
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops.

template <Real T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!tp.requires_grad(in)) continue;
      auto& gi = tp.grad(in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  }, "add");
}

template <Real T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [ia, ib](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& va = tp.value(ia);
    const auto& vb = tp.value(ib);
    if (tp.requires_grad(ia)) {
      auto& ga = tp.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
    }
    if (tp.requires_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
    }
  }, "mul");
}

template <Real T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia, factor](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gi = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += factor * g[i];
  }, "scale");
}

template <Real T>
Var<T> square(const Var<T>& a) { return mul(a, a); }

/// Sum of all elements as a rank-0 tensor.
template <Real T>
Var<T> sum(const Var<T>& a) {
  T s = 0;
  for (T v : a.value().values()) s += v;
  const std::size_t ia = a.id();
  return a.tape().record(Tensor<T>(Shape{}, s), {a}, [ia](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0];
    for (auto& v : tp.grad(ia).values()) v += g;
  }, "sum");
}

/// max(0, x); the subgradient at exactly zero is zero.
template <Real T>
Var<T> relu(const Var<T>& a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T(0) ? v : T(0);
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& x = tp.value(ia);
    auto& gi = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > T(0)) gi[i] += g[i];
  }, "relu");
}

template <Real T>
Var<T> reshape(const Var<T>& a, Shape shape) {
  Tensor<T> out = a.value().reshaped(std::move(shape));
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [ia](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gi = tp.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
  }, "reshape");
}

/// Concatenates rank-2 tensors [N, d_i] along the feature axis.
template <Real T>
Var<T> concat_features(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_features: no inputs");
  const std::size_t n = parts.front().shape().at(0);
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    require_rank(p.shape(), 2, "concat_features");
    if (p.shape()[0] != n) throw ShapeError("concat_features: batch mismatch");
    widths.push_back(p.shape()[1]);
    total += p.shape()[1];
  }
  Tensor<T> out(Shape{n, total});
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& v = parts[k].value();
    for (std::size_t r = 0; r < n; ++r)
      std::copy_n(v.data() + r * widths[k], widths[k], out.data() + r * total + col);
    col += widths[k];
  }
  std::vector<std::size_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  auto backward = [ids, widths, n, total](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    std::size_t c = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (tp.requires_grad(ids[k])) {
        auto& gi = tp.grad(ids[k]);
        for (std::size_t r = 0; r < n; ++r)
          for (std::size_t j = 0; j < widths[k]; ++j) gi[r * widths[k] + j] += g[r * total + c + j];
      }
      c += widths[k];
    }
  };
  return parts.front().tape().record(std::move(out), std::span<const Var<T>>(parts), backward,
                                     "concat");
}

// ---------------------------------------------------------------------------
// Dense layers.

/// x[N, din] * weight[din, dout] (+ bias[dout]).
template <Real T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias = nullptr) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(weight.shape(), 2, "linear weight");
  const std::size_t n = x.shape()[0], din = x.shape()[1], dout = weight.shape()[1];
  if (weight.shape()[0] != din)
    throw ShapeError("linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (bias && bias->shape() != Shape{dout})
    throw ShapeError("linear: bias " + shape_str(bias->shape()) + " vs dout " + std::to_string(dout));
  Tensor<T> out(Shape{n, dout});
  auto om = detail::as_mat(out, n, dout);
  om.noalias() = detail::as_mat(x.value(), n, din) * detail::as_mat(weight.value(), din, dout);
  if (bias)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < dout; ++c) out[r * dout + c] += bias->value()[c];
  const std::size_t ix = x.id(), iw = weight.id();
  const std::size_t ib = bias ? bias->id() : SIZE_MAX;
  auto backward = [=](Tape<T>& tp, std::size_t self) {
    const auto g = detail::as_mat(tp.grad(self), n, dout);
    if (tp.requires_grad(ix))
      detail::as_mat(tp.grad(ix), n, din).noalias() += g * detail::as_mat(tp.value(iw), din, dout).transpose();
    if (tp.requires_grad(iw))
      detail::as_mat(tp.grad(iw), din, dout).noalias() += detail::as_mat(tp.value(ix), n, din).transpose() * g;
    if (ib != SIZE_MAX && tp.requires_grad(ib)) {
      auto& gb = tp.grad(ib);
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < dout; ++c) gb[c] += g(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  };
  if (bias) return x.tape().record(std::move(out), {x, weight, *bias}, backward, "linear");
  return x.tape().record(std::move(out), {x, weight}, backward, "matmul");
}

template <Real T>
Var<T> matmul(const Var<T>& x, const Var<T>& weight) { return linear<T>(x, weight, nullptr); }

// ---------------------------------------------------------------------------
// Convolution.

struct Stride2 {
  std::size_t time = 1;
  std::size_t freq = 1;
};

/// 2D cross-correlation (no kernel flip) with "same" zero padding: output
/// spatial extent is ceil(input / stride). Kernel layout [kh, kw, Cin, Cout].
template <Real T>
Var<T> conv2d(const Var<T>& x, const Var<T>& kernel, Stride2 stride = {}) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(kernel.shape(), 4, "conv2d kernel");
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  const std::size_t n = xs[0], h = xs[1], w = xs[2], cin = xs[3];
  const std::size_t kh = ks[0], kw = ks[1], cout = ks[3];
  if (ks[2] != cin)
    throw ShapeError("conv2d: input channels " + std::to_string(cin) + " vs kernel " + shape_str(ks));
  if (stride.time == 0 || stride.freq == 0) throw ShapeError("conv2d: stride must be >= 1");
  const std::size_t ho = ceil_div(h, stride.time), wo = ceil_div(w, stride.freq);
  const std::size_t pad_h = std::max<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>((ho - 1) * stride.time + kh) - static_cast<std::ptrdiff_t>(h), 0);
  const std::size_t pad_w = std::max<std::ptrdiff_t>(
      static_cast<std::ptrdiff_t>((wo - 1) * stride.freq + kw) - static_cast<std::ptrdiff_t>(w), 0);
  const std::ptrdiff_t top = static_cast<std::ptrdiff_t>(pad_h / 2);
  const std::ptrdiff_t left = static_cast<std::ptrdiff_t>(pad_w / 2);
  const std::size_t kdim = kh * kw * cin;
  const detail::ConvGeometry geo{n, h, w, cin, ho, wo, kh, kw, stride.time, stride.freq, top, left};
  // The im2col matrix is built in blocks of whole output lines sized to stay
  // cache resident, and rebuilt in backward rather than stored.
  const std::size_t lines = n * ho;
  const std::size_t block = std::max<std::size_t>(1, (std::size_t{1} << 18) / std::max<std::size_t>(wo * kdim, 1));
  const auto ei = [](std::size_t v) { return static_cast<Eigen::Index>(v); };

  Tensor<T> out(Shape{n, ho, wo, cout});
  {
    detail::RowMat<T> cols(ei(std::min(block, lines) * wo), ei(kdim));
    for (std::size_t l0 = 0; l0 < lines; l0 += block) {
      const std::size_t l1 = std::min(lines, l0 + block), r = (l1 - l0) * wo;
      detail::im2col_pass<T, true>(geo, l0, l1, cols.data(), const_cast<T*>(x.value().data()));
      detail::MapMat<T>(out.data() + l0 * wo * cout, ei(r), ei(cout)).noalias() =
          cols.topRows(ei(r)) * detail::as_mat(kernel.value(), kdim, cout);
    }
  }

  const std::size_t ix = x.id(), ik = kernel.id();
  auto backward = [=](Tape<T>& tp, std::size_t self) {
    const bool need_k = tp.requires_grad(ik), need_x = tp.requires_grad(ix);
    const T* g = tp.grad(self).data();
    const auto kmat = detail::as_mat(tp.value(ik), kdim, cout);
    detail::RowMat<T> cols(ei(std::min(block, lines) * wo), ei(kdim));
    for (std::size_t l0 = 0; l0 < lines; l0 += block) {
      const std::size_t l1 = std::min(lines, l0 + block), r = (l1 - l0) * wo;
      const detail::CMapMat<T> gb(g + l0 * wo * cout, ei(r), ei(cout));
      if (need_k) {
        detail::im2col_pass<T, true>(geo, l0, l1, cols.data(), const_cast<T*>(tp.value(ix).data()));
        detail::as_mat(tp.grad(ik), kdim, cout).noalias() += cols.topRows(ei(r)).transpose() * gb;
      }
      if (need_x) {
        cols.topRows(ei(r)).noalias() = gb * kmat.transpose();
        detail::im2col_pass<T, false>(geo, l0, l1, cols.data(), tp.grad(ix).data());
      }
    }
  };
  return x.tape().record(std::move(out), {x, kernel}, backward, "conv2d");
}

// ---------------------------------------------------------------------------
// Normalization.

/// Running statistics of one batch-norm layer. Uninitialized until the first
/// training-mode pass, which copies the batch statistics in directly.
template <Real T>
struct BatchNormStats {
  Tensor<T> mean;
  Tensor<T> var;
  bool initialized = false;
};

enum class BnMode { kTrain, kEval };

/// Per-channel normalization over N, T, F. Train mode uses batch statistics
/// (population variance) and, when `update` is given, folds them into it with
/// an exponential moving average. Eval mode normalizes with `running`.
template <Real T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const BatchNormStats<T>& running, BnMode mode,
                  BatchNormStats<T>* update = nullptr, T momentum = T(0.1)) {
  const auto& xs = x.shape();
  if (xs.empty()) throw ShapeError("batch_norm: rank-0 input");
  const std::size_t c = xs.back();
  const std::size_t m = x.value().size() / std::max<std::size_t>(c, 1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ShapeError("batch_norm: gamma/beta must have shape [" + std::to_string(c) + "]");
  const T eps = sqrt_epsilon<T>();
  const T* xv = x.value().data();

  using ArrMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  const ArrMap xa(xv, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(c));
  Tensor<T> mean(Shape{c}), var(Shape{c});
  if (mode == BnMode::kTrain) {
    if (m < 2) throw ShapeError("batch_norm: training mode needs at least 2 values per channel");
    Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>> mu(mean.data(), static_cast<Eigen::Index>(c));
    Eigen::Map<Eigen::Array<T, 1, Eigen::Dynamic>> va(var.data(), static_cast<Eigen::Index>(c));
    mu = xa.colwise().sum() / static_cast<T>(m);
    va = (xa.rowwise() - mu).square().colwise().sum() / static_cast<T>(m);
    if (update && !update->initialized) {
      update->mean = mean;
      update->var = var;
      update->initialized = true;
    } else if (update) {
      for (std::size_t k = 0; k < c; ++k) {
        update->mean[k] = (T(1) - momentum) * update->mean[k] + momentum * mean[k];
        update->var[k] = (T(1) - momentum) * update->var[k] + momentum * var[k];
      }
    }
  } else {
    if (!running.initialized)
      throw Error("batch_norm: eval mode requested before any running statistics were recorded");
    if (running.mean.shape() != Shape{c}) throw ShapeError("batch_norm: running stats shape mismatch");
    mean = running.mean;
    var = running.var;
  }

  using Row = Eigen::Array<T, 1, Eigen::Dynamic>;
  using ArrMat = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MutArrMap = Eigen::Map<ArrMat>;
  const auto ci = static_cast<Eigen::Index>(c), mi = static_cast<Eigen::Index>(m);
  auto inv_std = std::make_shared<Row>(
      (Eigen::Map<const Row>(var.data(), ci) + eps).rsqrt());
  const Eigen::Map<const Row> mu(mean.data(), ci);
  auto xhat = std::make_shared<Tensor<T>>(xs);
  Tensor<T> out(xs);
  MutArrMap xh(xhat->data(), mi, ci);
  xh = (xa.rowwise() - mu).rowwise() * (*inv_std);
  MutArrMap(out.data(), mi, ci) = (xh.rowwise() * Eigen::Map<const Row>(gamma.value().data(), ci)).rowwise() +
                                  Eigen::Map<const Row>(beta.value().data(), ci);

  const bool batch_stats = mode == BnMode::kTrain;
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  auto backward = [=](Tape<T>& tp, std::size_t self) {
    const Eigen::Map<const ArrMat> g(tp.grad(self).data(), mi, ci);
    const Eigen::Map<const ArrMat> xhm(xhat->data(), mi, ci);
    const Row sum_g = g.colwise().sum();
    const Row sum_gx = (g * xhm).colwise().sum();
    if (tp.requires_grad(ig)) Eigen::Map<Row>(tp.grad(ig).data(), ci) += sum_gx;
    if (tp.requires_grad(ib)) Eigen::Map<Row>(tp.grad(ib).data(), ci) += sum_g;
    if (!tp.requires_grad(ix)) return;
    const Row scale = Eigen::Map<const Row>(tp.value(ig).data(), ci) * (*inv_std);
    MutArrMap gx(tp.grad(ix).data(), mi, ci);
    if (batch_stats) {
      const T inv_m = T(1) / static_cast<T>(m);
      gx += ((g.rowwise() - sum_g * inv_m) - xhm.rowwise() * (sum_gx * inv_m)).rowwise() * scale;
    } else {
      gx += g.rowwise() * scale;
    }
  };
  return x.tape().record(std::move(out), {x, gamma, beta}, backward, "batch_norm");
}

/// Population mean and variance along `axis`; both outputs drop that axis.
template <Real T>
std::pair<Var<T>, Var<T>> reduce_moments(const Var<T>& x, std::size_t axis) {
  const auto [outer, len, inner] = detail::split_axis(x.shape(), axis);
  if (len == 0) throw ShapeError("reduce_moments: empty axis");
  Shape os = x.shape();
  os.erase(os.begin() + static_cast<std::ptrdiff_t>(axis));
  Tensor<T> mean(os), var(os);
  const T* xv = x.value().data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) mean[o * inner + i] += xv[(o * len + k) * inner + i];
    for (std::size_t i = 0; i < inner; ++i) mean[o * inner + i] /= static_cast<T>(len);
    for (std::size_t k = 0; k < len; ++k)
      for (std::size_t i = 0; i < inner; ++i) {
        const T d = xv[(o * len + k) * inner + i] - mean[o * inner + i];
        var[o * inner + i] += d * d;
      }
    for (std::size_t i = 0; i < inner; ++i) var[o * inner + i] /= static_cast<T>(len);
  }
  const std::size_t ix = x.id();
  Tape<T>& tape = x.tape();
  Var<T> mean_v = tape.record(std::move(mean), {x}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    const T inv = T(1) / static_cast<T>(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) gx[(o * len + k) * inner + i] += g[o * inner + i] * inv;
  }, "moments.mean");
  const std::size_t im = mean_v.id();
  Var<T> var_v = tape.record(std::move(var), {x}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& mu = tp.value(im);
    const auto& xval = tp.value(ix);
    auto& gx = tp.grad(ix);
    const T two_inv = T(2) / static_cast<T>(len);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < len; ++k)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t p = (o * len + k) * inner + i;
          gx[p] += g[o * inner + i] * two_inv * (xval[p] - mu[o * inner + i]);
        }
  }, "moments.var");
  return {mean_v, var_v};
}

/// sqrt(x + eps), elementwise.
template <Real T>
Var<T> sqrt_eps(const Var<T>& x, T eps) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = std::sqrt(v + eps);
  const std::size_t ix = x.id();
  auto y = std::make_shared<Tensor<T>>(out);
  return x.tape().record(std::move(out), {x}, [ix, y](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / (T(2) * (*y)[i]);
  }, "sqrt_eps");
}

/// Divides each slice along `axis` of a rank-2 tensor by max(norm, eps).
/// axis = 1 normalizes rows, axis = 0 normalizes columns.
template <Real T>
Var<T> l2_normalize(const Var<T>& x, T eps, std::size_t axis = 1) {
  require_rank(x.shape(), 2, "l2_normalize");
  if (axis > 1) throw ShapeError("l2_normalize: axis must be 0 or 1");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  // Slice s holds `len` elements spaced `step` apart starting at first(s).
  const std::size_t slices = axis == 1 ? rows : cols;
  const std::size_t len = axis == 1 ? cols : rows;
  const std::size_t step = axis == 1 ? 1 : cols;
  auto first = [=](std::size_t s) { return axis == 1 ? s * cols : s; };
  auto norms = std::make_shared<std::vector<T>>(slices);
  Tensor<T> out = x.value();
  for (std::size_t s = 0; s < slices; ++s) {
    T ss = 0;
    for (std::size_t k = 0; k < len; ++k) ss += out[first(s) + k * step] * out[first(s) + k * step];
    const T nrm = std::sqrt(ss);
    (*norms)[s] = nrm;
    const T denom = std::max(nrm, eps);
    for (std::size_t k = 0; k < len; ++k) out[first(s) + k * step] /= denom;
  }
  auto y = std::make_shared<Tensor<T>>(out);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t s = 0; s < slices; ++s) {
      const T nrm = (*norms)[s];
      if (nrm > eps) {
        T dot = 0;
        for (std::size_t k = 0; k < len; ++k) dot += (*y)[first(s) + k * step] * g[first(s) + k * step];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t p = first(s) + k * step;
          gx[p] += (g[p] - (*y)[p] * dot) / nrm;
        }
      } else {
        for (std::size_t k = 0; k < len; ++k) gx[first(s) + k * step] += g[first(s) + k * step] / eps;
      }
    }
  }, "l2_normalize");
}

/// Multiplies Y[N, ..., C] by a constant per-example channel mask[N, C].
template <Real T>
Var<T> channel_mask(const Var<T>& x, const Tensor<T>& mask) {
  const auto& xs = x.shape();
  if (xs.size() < 2) throw ShapeError("channel_mask: rank must be >= 2");
  const std::size_t n = xs.front(), c = xs.back();
  if (mask.shape() != Shape{n, c})
    throw ShapeError("channel_mask: mask " + shape_str(mask.shape()) + " vs input " + shape_str(xs));
  const std::size_t per = x.value().size() / (n * c);
  Tensor<T> out = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t p = 0; p < per; ++p)
      for (std::size_t k = 0; k < c; ++k) out[(b * per + p) * c + k] *= mask[b * c + k];
  const std::size_t ix = x.id();
  auto m = std::make_shared<Tensor<T>>(mask);
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gx = tp.grad(ix);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t p = 0; p < per; ++p)
        for (std::size_t k = 0; k < c; ++k) {
          const std::size_t o = (b * per + p) * c + k;
          gx[o] += g[o] * (*m)[b * c + k];
        }
  }, "channel_mask");
}

}  // namespace corrpool::ops
