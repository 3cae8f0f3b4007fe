// corrpool/loss.hpp

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

// Additive angular margin (AAM) softmax head.
//
// Embeddings and the class columns of the head are l2-normalized, so the
// logits are scaled cosines. The true class is penalized by adding the margin
// to its angle: s * cos(theta_y + m), expanded as
// cos(theta) cos(m) - sin(theta) sin(m).

#pragma once

#include <numbers>
#include <random>

#include "corrpool/ops.hpp"

namespace corrpool {

struct AamConfig {
  double scale = 30.0;
  std::vector<double> margin_schedule{0.1, 0.2, 0.3};
  /// Fractions of total training steps at which the next margin starts;
  /// one fewer entry than margin_schedule.
  std::vector<double> schedule_boundaries{1.0 / 3.0, 2.0 / 3.0};

  void validate() const {
    if (!(scale > 0.0)) throw ConfigError("aam.scale must be positive");
    if (margin_schedule.empty()) throw ConfigError("aam.margin_schedule must not be empty");
    if (schedule_boundaries.size() + 1 != margin_schedule.size())
      throw ConfigError("aam.schedule_boundaries needs exactly one entry fewer than margin_schedule");
    for (std::size_t i = 0; i < margin_schedule.size(); ++i) {
      const double m = margin_schedule[i];
      if (!(m >= 0.0 && m < std::numbers::pi / 2)) throw ConfigError("aam margins must lie in [0, pi/2)");
      if (i && m < margin_schedule[i - 1]) throw ConfigError("aam margins must be nondecreasing");
    }
    for (std::size_t i = 0; i < schedule_boundaries.size(); ++i) {
      const double b = schedule_boundaries[i];
      if (!(b > 0.0 && b <= 1.0) || (i && b <= schedule_boundaries[i - 1]))
        throw ConfigError("aam.schedule_boundaries must be increasing fractions in (0, 1]");
    }
  }
};

/// Index into margin_schedule in effect at `step`.
inline std::size_t margin_index_at_step(std::size_t step, std::size_t total_steps, const AamConfig& cfg) {
  std::size_t idx = 0;
  for (double b : cfg.schedule_boundaries)
    if (static_cast<double>(step) >= b * static_cast<double>(total_steps)) ++idx;
  return idx;
}

/// Piecewise-constant margin curriculum.
inline double margin_at_step(std::size_t step, std::size_t total_steps, const AamConfig& cfg) {
  return cfg.margin_schedule.at(margin_index_at_step(step, total_steps, cfg));
}

/// Classification head weights [d_e, n_speakers].
template <Real T>
Tensor<T> init_head(std::size_t embed_dim, std::size_t n_speakers, std::mt19937_64& rng) {
  Tensor<T> w(Shape{embed_dim, n_speakers});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (auto& v : w.values()) v = static_cast<T>(nd(rng));
  return w;
}

inline constexpr double kCosineClamp = 1e-7;

/// Margin-adjusted scaled logits from cosines[N, K]: s cos(theta_y + m) for
/// the labelled class, s cos(theta_j) elsewhere. Cosines are clamped to
/// [-1 + 1e-7, 1 - 1e-7] first.
template <Real T>
Var<T> aam_logits(const Var<T>& cosines, std::span<const std::size_t> labels, T margin, T scale) {
  require_rank(cosines.shape(), 2, "aam_logits");
  const std::size_t n = cosines.shape()[0], k = cosines.shape()[1];
  if (labels.size() != n)
    throw ShapeError("aam_logits: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(n));
  for (std::size_t y : labels)
    if (y >= k) throw ConfigError("label " + std::to_string(y) + " out of range [0, " + std::to_string(k) + ")");
  const T lo = T(-1) + static_cast<T>(kCosineClamp), hi = T(1) - static_cast<T>(kCosineClamp);
  const T cm = std::cos(margin), sm = std::sin(margin);
  Tensor<T> out(Shape{n, k});
  const auto& cv = cosines.value();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < k; ++j) {
      const T c = std::clamp(cv[r * k + j], lo, hi);
      if (j == labels[r]) {
        const T sn = std::sqrt(std::max(T(1) - c * c, T(0)));
        out[r * k + j] = scale * (c * cm - sn * sm);
      } else {
        out[r * k + j] = scale * c;
      }
    }
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t ic = cosines.id();
  return cosines.tape().record(std::move(out), {cosines}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& cval = tp.value(ic);
    auto& gc = tp.grad(ic);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const T raw = cval[r * k + j];
        if (raw < lo || raw > hi) continue;
        T d = scale;
        if (j == lab[r]) {
          const T sn = std::sqrt(std::max(T(1) - raw * raw, T(0)));
          d = scale * (cm + raw / sn * sm);
        }
        gc[r * k + j] += g[r * k + j] * d;
      }
  }, "aam_logits");
}

/// Mean softmax cross-entropy of logits[N, K] against integer labels.
template <Real T>
Var<T> softmax_cross_entropy(const Var<T>& logits, std::span<const std::size_t> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != n) throw ShapeError("softmax_cross_entropy: label count mismatch");
  auto probs = std::make_shared<Tensor<T>>(Shape{n, k});
  const auto& lv = logits.value();
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= k) throw ConfigError("label " + std::to_string(labels[r]) + " out of range");
    T mx = lv[r * k];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, lv[r * k + j]);
    T z = 0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(lv[r * k + j] - mx);
    const T lz = std::log(z) + mx;
    for (std::size_t j = 0; j < k; ++j) (*probs)[r * k + j] = std::exp(lv[r * k + j] - lz);
    loss += lz - lv[r * k + labels[r]];
  }
  loss /= static_cast<T>(n);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  const std::size_t il = logits.id();
  return logits.tape().record(Tensor<T>(Shape{}, loss), {logits}, [=](Tape<T>& tp, std::size_t self) {
    const T g = tp.grad(self)[0] / static_cast<T>(n);
    auto& gl = tp.grad(il);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < k; ++j)
        gl[r * k + j] += g * ((*probs)[r * k + j] - (j == lab[r] ? T(1) : T(0)));
  }, "cross_entropy");
}

template <Real T>
struct AamOutput {
  Var<T> loss;     // rank-0
  Var<T> logits;   // [N, n_speakers]
  Var<T> cosines;  // [N, n_speakers]
};

/// Full AAM head: normalizes embeddings[N, d_e] row-wise and head[d_e, K]
/// column-wise, then computes margin logits and the mean cross-entropy.
template <Real T>
AamOutput<T> aam_loss(const Var<T>& embeddings, std::span<const std::size_t> labels, const Var<T>& head,
                      T margin, T scale) {
  require_rank(head.shape(), 2, "aam head");
  if (embeddings.shape().size() != 2 || embeddings.shape()[1] != head.shape()[0])
    throw ShapeError("aam_loss: embeddings " + shape_str(embeddings.shape()) + " vs head " + shape_str(head.shape()));
  const T eps = T(1e-12);
  Var<T> e = ops::l2_normalize(embeddings, eps, 1);
  Var<T> w = ops::l2_normalize(head, eps, 0);
  Var<T> cos = ops::matmul(e, w);
  Var<T> logits = aam_logits(cos, labels, margin, scale);
  return {softmax_cross_entropy(logits, labels), logits, cos};
}

}  // namespace corrpool
