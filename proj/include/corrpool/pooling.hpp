// corrpool/pooling.hpp

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

// Utterance-level pooling of the backbone output Y[N, T, F, C].
//
// Two families are provided:
//
//  * statistical pooling: per (frequency, channel) time mean, optionally
//    concatenated with the time standard deviation;
//
//  * frequency-dependent channel-wise correlation pooling, which runs, in
//    this order:
//      1. channel dropout (one mask of length C per example, broadcast over
//         time and frequency),
//      2. merging f_r consecutive frequency bins into one range, which
//         lengthens the time axis by f_r,
//      3. a learned per-range channel reduction C -> C',
//      4. mean (and optionally variance) normalization along time,
//      5. S[f, c, c'] = 1/T_r sum_t Z[t, f, c] Z[t, f, c'],
//      6. flattening the free entries of each S_f,
//      7. a linear embedding layer.
//
// With variance normalization each S_f is a correlation matrix: unit
// diagonal (dropped when flattening) and entries in [-1, 1].

#pragma once

#include <random>

#include "corrpool/ops.hpp"

namespace corrpool {

enum class PoolingMode { kBaselineMean, kBaselineMeanStd, kCorrelation, kCombined };
enum class ReductionKind { kPerFrequency3d, kShared2d };
enum class Normalization { kMeanOnly, kMeanAndVar };

inline const char* to_string(PoolingMode m) {
  switch (m) {
    case PoolingMode::kBaselineMean: return "baseline_mean";
    case PoolingMode::kBaselineMeanStd: return "baseline_meanstd";
    case PoolingMode::kCorrelation: return "correlation";
    case PoolingMode::kCombined: return "combined";
  }
  return "?";
}

inline PoolingMode parse_pooling_mode(const std::string& s) {
  for (auto m : {PoolingMode::kBaselineMean, PoolingMode::kBaselineMeanStd,
                 PoolingMode::kCorrelation, PoolingMode::kCombined})
    if (s == to_string(m)) return m;
  throw ConfigError("unknown pooling mode '" + s +
                    "' (expected baseline_mean, baseline_meanstd, correlation or combined)");
}

inline const char* to_string(ReductionKind k) {
  return k == ReductionKind::kPerFrequency3d ? "per_frequency_3d" : "shared_2d";
}
inline ReductionKind parse_reduction_kind(const std::string& s) {
  if (s == "per_frequency_3d") return ReductionKind::kPerFrequency3d;
  if (s == "shared_2d") return ReductionKind::kShared2d;
  throw ConfigError("unknown reduction_kind '" + s + "'");
}

inline const char* to_string(Normalization n) {
  return n == Normalization::kMeanOnly ? "mean_only" : "mean_and_var";
}
inline Normalization parse_normalization(const std::string& s) {
  if (s == "mean_only") return Normalization::kMeanOnly;
  if (s == "mean_and_var") return Normalization::kMeanAndVar;
  throw ConfigError("unknown normalization '" + s + "'");
}

struct PoolingConfig {
  PoolingMode mode = PoolingMode::kCorrelation;
  std::size_t c_reduced = 64;  // C'
  std::size_t f_merge = 2;     // f_r
  ReductionKind reduction_kind = ReductionKind::kPerFrequency3d;
  Normalization normalization = Normalization::kMeanAndVar;
  double dropout_p = 0.25;
  std::size_t embed_dim = 256;

  bool uses_correlation() const {
    return mode == PoolingMode::kCorrelation || mode == PoolingMode::kCombined;
  }

  /// Checks the config against the backbone output geometry (F, C).
  void validate(std::size_t freq, std::size_t channels) const {
    if (embed_dim == 0) throw ConfigError("pooling.embed_dim must be positive");
    if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("pooling.dropout_p must be in [0, 1)");
    if (!uses_correlation()) return;
    if (f_merge == 0 || freq % f_merge != 0)
      throw ConfigError("pooling.f_merge=" + std::to_string(f_merge) + " must divide F=" +
                        std::to_string(freq));
    if (c_reduced == 0 || c_reduced > channels)
      throw ConfigError("pooling.c_reduced=" + std::to_string(c_reduced) + " must be in [1, C=" +
                        std::to_string(channels) + "]");
    if (normalization == Normalization::kMeanAndVar && c_reduced < 2)
      throw ConfigError("mean_and_var correlation pooling needs c_reduced >= 2");
  }
};

/// Number of free entries flattened per frequency range.
inline std::size_t triangle_size(std::size_t c, Normalization norm) {
  return norm == Normalization::kMeanAndVar ? c * (c - 1) / 2 : c * (c + 1) / 2;
}

/// Length of the pooled vector fed to the embedding layer.
inline std::size_t pooled_dim(const PoolingConfig& cfg, std::size_t freq, std::size_t channels) {
  const std::size_t stat = freq * channels;
  switch (cfg.mode) {
    case PoolingMode::kBaselineMean: return stat;
    case PoolingMode::kBaselineMeanStd: return 2 * stat;
    case PoolingMode::kCorrelation:
      return (freq / cfg.f_merge) * triangle_size(cfg.c_reduced, cfg.normalization);
    case PoolingMode::kCombined:
      return (freq / cfg.f_merge) * triangle_size(cfg.c_reduced, cfg.normalization) + 2 * stat;
  }
  return 0;
}

template <Real T>
struct PoolParams {
  /// Channel reduction: [F_r, C, C'] (per-frequency) or [C, C'] (shared).
  Tensor<T> reduction;
  Tensor<T> embed_weight;  // [d_p, d_e]
  Tensor<T> embed_bias;    // [d_e]
};

/// Fan-in scaled uniform initialization; deterministic in `rng`.
template <Real T>
PoolParams<T> init_pool_params(const PoolingConfig& cfg, std::size_t freq, std::size_t channels,
                               std::mt19937_64& rng) {
  cfg.validate(freq, channels);
  PoolParams<T> p;
  auto fill_uniform = [&](Tensor<T>& t, double bound) {
    std::uniform_real_distribution<double> u(-bound, bound);
    for (auto& v : t.values()) v = static_cast<T>(u(rng));
  };
  if (cfg.uses_correlation()) {
    const std::size_t fr = freq / cfg.f_merge;
    p.reduction = cfg.reduction_kind == ReductionKind::kPerFrequency3d
                      ? Tensor<T>(Shape{fr, channels, cfg.c_reduced})
                      : Tensor<T>(Shape{channels, cfg.c_reduced});
    fill_uniform(p.reduction, std::sqrt(3.0 / static_cast<double>(channels)));
  }
  const std::size_t dp = pooled_dim(cfg, freq, channels);
  p.embed_weight = Tensor<T>(Shape{dp, cfg.embed_dim});
  fill_uniform(p.embed_weight, std::sqrt(3.0 / static_cast<double>(dp)));
  p.embed_bias = Tensor<T>(Shape{cfg.embed_dim});
  return p;
}

// ---------------------------------------------------------------------------
// Pipeline steps as differentiable ops.

/// Statistical pooling: [mean over T of each (f, c); std of each (f, c)].
/// Output [N, 2FC], or [N, FC] when `with_std` is false.
template <Real T>
Var<T> stat_pool(const Var<T>& y, bool with_std = true) {
  require_rank(y.shape(), 4, "stat_pool");
  const std::size_t n = y.shape()[0], f = y.shape()[2], c = y.shape()[3];
  auto [mean, var] = ops::reduce_moments(y, 1);
  Var<T> m = ops::reshape(mean, Shape{n, f * c});
  if (!with_std) return m;
  Var<T> sd = ops::reshape(ops::sqrt_eps(var, sqrt_epsilon<T>()), Shape{n, f * c});
  return ops::concat_features<T>({m, sd});
}

/// Per-example channel mask: each entry kept with probability 1 - p and then
/// scaled by 1 / (1 - p).
template <Real T>
Tensor<T> sample_channel_mask(std::size_t n, std::size_t c, double p, std::mt19937_64& rng) {
  Tensor<T> mask(Shape{n, c});
  std::bernoulli_distribution keep(1.0 - p);
  const T scale = static_cast<T>(1.0 / (1.0 - p));
  for (auto& v : mask.values()) v = keep(rng) ? scale : T(0);
  return mask;
}

template <Real T>
Var<T> channel_dropout(const Var<T>& y, double p, std::mt19937_64& rng, bool training) {
  if (!training || p == 0.0) return y;
  require_rank(y.shape(), 4, "channel_dropout");
  return ops::channel_mask(y, sample_channel_mask<T>(y.shape()[0], y.shape()[3], p, rng));
}

/// Merges f_r consecutive frequency bins: [N, T, F, C] -> [N, T f_r, F / f_r, C].
/// Sub-bin j of range r lands at merged time index j T + t.
template <Real T>
Var<T> freq_range_reshape(const Var<T>& y, std::size_t f_r) {
  require_rank(y.shape(), 4, "freq_range_reshape");
  const std::size_t n = y.shape()[0], t = y.shape()[1], f = y.shape()[2], c = y.shape()[3];
  if (f_r == 0 || f % f_r != 0)
    throw ShapeError("freq_range_reshape: f_r=" + std::to_string(f_r) + " does not divide F=" +
                     std::to_string(f));
  const std::size_t fr = f / f_r, tr = t * f_r;
  // out[b, j*T + s, r, k] = y[b, s, r*f_r + j, k]
  auto src_offset = [=](std::size_t b, std::size_t tt, std::size_t r) {
    const std::size_t j = tt / t, s = tt % t;
    return ((b * t + s) * f + r * f_r + j) * c;
  };
  Tensor<T> out(Shape{n, tr, fr, c});
  const T* yv = y.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t tt = 0; tt < tr; ++tt)
      for (std::size_t r = 0; r < fr; ++r)
        std::copy_n(yv + src_offset(b, tt, r), c, out.data() + ((b * tr + tt) * fr + r) * c);
  const std::size_t iy = y.id();
  return y.tape().record(std::move(out), {y}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gy = tp.grad(iy);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t tt = 0; tt < tr; ++tt)
        for (std::size_t r = 0; r < fr; ++r) {
          const T* src = g.data() + ((b * tr + tt) * fr + r) * c;
          T* dst = gy.data() + src_offset(b, tt, r);
          for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
        }
  }, "freq_range_reshape");
}

/// Y'[t, f, c'] = sum_c L[f, c, c'] Y[t, f, c]. A rank-2 L[C, C'] is shared
/// by all frequency ranges. No bias.
template <Real T>
Var<T> channel_reduce(const Var<T>& y, const Var<T>& l) {
  require_rank(y.shape(), 4, "channel_reduce input");
  const std::size_t n = y.shape()[0], t = y.shape()[1], f = y.shape()[2], c = y.shape()[3];
  const bool shared = l.shape().size() == 2;
  if (!shared) require_rank(l.shape(), 3, "channel_reduce kernel");
  const std::size_t lc = shared ? l.shape()[0] : l.shape()[1];
  const std::size_t cr = l.shape().back();
  if (lc != c || (!shared && l.shape()[0] != f))
    throw ShapeError("channel_reduce: input " + shape_str(y.shape()) + " vs kernel " + shape_str(l.shape()));
  const std::size_t rows = n * t;
  auto l_slice = [=](const Tensor<T>& lv, std::size_t r) { return lv.data() + (shared ? 0 : r * c * cr); };

  Tensor<T> out(Shape{n, t, f, cr});
  const T* yv = y.value().data();
  for (std::size_t row = 0; row < rows; ++row)
    for (std::size_t r = 0; r < f; ++r) {
      const T* yin = yv + (row * f + r) * c;
      const T* lr = l_slice(l.value(), r);
      T* o = out.data() + (row * f + r) * cr;
      for (std::size_t k = 0; k < c; ++k) {
        const T a = yin[k];
        const T* lrow = lr + k * cr;
        for (std::size_t j = 0; j < cr; ++j) o[j] += a * lrow[j];
      }
    }
  const std::size_t iy = y.id(), il = l.id();
  return y.tape().record(std::move(out), {y, l}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& yval = tp.value(iy);
    const auto& lval = tp.value(il);
    const bool gy_needed = tp.requires_grad(iy), gl_needed = tp.requires_grad(il);
    T* gy = gy_needed ? tp.grad(iy).data() : nullptr;
    T* gl = gl_needed ? tp.grad(il).data() : nullptr;
    for (std::size_t row = 0; row < rows; ++row)
      for (std::size_t r = 0; r < f; ++r) {
        const T* go = g.data() + (row * f + r) * cr;
        const T* yin = yval.data() + (row * f + r) * c;
        const T* lr = l_slice(lval, r);
        for (std::size_t k = 0; k < c; ++k) {
          const T* lrow = lr + k * cr;
          if (gy) {
            T acc = 0;
            for (std::size_t j = 0; j < cr; ++j) acc += go[j] * lrow[j];
            gy[(row * f + r) * c + k] += acc;
          }
          if (gl) {
            T* glrow = gl + (shared ? 0 : r * c * cr) + k * cr;
            const T a = yin[k];
            for (std::size_t j = 0; j < cr; ++j) glrow[j] += a * go[j];
          }
        }
      }
  }, "channel_reduce");
}

/// Per (example, frequency, channel) normalization along time. Mean-only
/// subtracts the time mean; mean-and-var also divides by sqrt(var + eps), so
/// channels that are constant in time map to zeros.
template <Real T>
Var<T> time_normalize(const Var<T>& y, Normalization mode, T eps = sqrt_epsilon<T>()) {
  require_rank(y.shape(), 4, "time_normalize");
  const std::size_t n = y.shape()[0], t = y.shape()[1], fc = y.shape()[2] * y.shape()[3];
  if (t == 0) throw ShapeError("time_normalize: empty time axis");
  const bool scale_var = mode == Normalization::kMeanAndVar;
  auto inv_std = std::make_shared<std::vector<T>>(n * fc, T(1));
  Tensor<T> out = y.value();
  const T inv_t = T(1) / static_cast<T>(t);
  for (std::size_t b = 0; b < n; ++b) {
    T* base = out.data() + b * t * fc;
    std::vector<T> mu(fc, T(0)), var(fc, T(0));
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t k = 0; k < fc; ++k) mu[k] += base[s * fc + k];
    for (auto& v : mu) v *= inv_t;
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t k = 0; k < fc; ++k) base[s * fc + k] -= mu[k];
    if (!scale_var) continue;
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t k = 0; k < fc; ++k) var[k] += base[s * fc + k] * base[s * fc + k];
    for (std::size_t k = 0; k < fc; ++k) (*inv_std)[b * fc + k] = T(1) / std::sqrt(var[k] * inv_t + eps);
    for (std::size_t s = 0; s < t; ++s)
      for (std::size_t k = 0; k < fc; ++k) base[s * fc + k] *= (*inv_std)[b * fc + k];
  }
  auto z = std::make_shared<Tensor<T>>(out);
  const std::size_t iy = y.id();
  return y.tape().record(std::move(out), {y}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gy = tp.grad(iy);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = b * t * fc;
      std::vector<T> sum_g(fc, T(0)), sum_gz(fc, T(0));
      for (std::size_t s = 0; s < t; ++s)
        for (std::size_t k = 0; k < fc; ++k) {
          sum_g[k] += g[off + s * fc + k];
          sum_gz[k] += g[off + s * fc + k] * (*z)[off + s * fc + k];
        }
      for (std::size_t s = 0; s < t; ++s)
        for (std::size_t k = 0; k < fc; ++k) {
          const std::size_t p = off + s * fc + k;
          if (scale_var) {
            gy[p] += (*inv_std)[b * fc + k] *
                     (g[p] - inv_t * sum_g[k] - (*z)[p] * inv_t * sum_gz[k]);
          } else {
            gy[p] += g[p] - inv_t * sum_g[k];
          }
        }
    }
  }, "time_normalize");
}

/// S[n, f, c, c'] = 1/T sum_t Z[n, t, f, c] Z[n, t, f, c']. The upper
/// triangle is computed and mirrored, so each S_f is exactly symmetric.
template <Real T>
Var<T> corr_pool(const Var<T>& z) {
  require_rank(z.shape(), 4, "corr_pool");
  const std::size_t n = z.shape()[0], t = z.shape()[1], f = z.shape()[2], c = z.shape()[3];
  const T inv_t = T(1) / static_cast<T>(std::max<std::size_t>(t, 1));
  Tensor<T> out(Shape{n, f, c, c});
  const T* zv = z.value().data();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t r = 0; r < f; ++r) {
      T* s = out.data() + (b * f + r) * c * c;
      for (std::size_t tt = 0; tt < t; ++tt) {
        const T* row = zv + ((b * t + tt) * f + r) * c;
        for (std::size_t i = 0; i < c; ++i) {
          const T zi = row[i];
          for (std::size_t j = i; j < c; ++j) s[i * c + j] += zi * row[j];
        }
      }
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = i; j < c; ++j) {
          s[i * c + j] *= inv_t;
          s[j * c + i] = s[i * c + j];
        }
    }
  const std::size_t iz = z.id();
  return z.tape().record(std::move(out), {z}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    const auto& zval = tp.value(iz);
    auto& gz = tp.grad(iz);
    std::vector<T> sym(c * c);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t r = 0; r < f; ++r) {
        const T* gs = g.data() + (b * f + r) * c * c;
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < c; ++j) sym[i * c + j] = (gs[i * c + j] + gs[j * c + i]) * inv_t;
        for (std::size_t tt = 0; tt < t; ++tt) {
          const std::size_t off = ((b * t + tt) * f + r) * c;
          for (std::size_t i = 0; i < c; ++i) {
            T acc = 0;
            for (std::size_t j = 0; j < c; ++j) acc += sym[i * c + j] * zval[off + j];
            gz[off + i] += acc;
          }
        }
      }
  }, "corr_pool");
}

/// Test hook for the self-test negative control: when set, flatten_pool
/// reads the lower triangle with a column-major walk that pairs mismatched
/// entries, which the symmetry check must reject.
inline bool& flatten_corruption_hook() {
  static bool corrupt = false;
  return corrupt;
}

/// Symmetric-matrix tolerance used by flatten_pool.
inline constexpr double kSymmetryTolerance = 1e-5;

/// Flattens S[N, F_r, C', C'] into [N, d_p]: the strict upper triangle of
/// each S_f for mean_and_var (the unit diagonal carries no information), the
/// upper triangle including the diagonal for mean_only. Ranges are emitted in
/// ascending order, each triangle row-major.
template <Real T>
Var<T> flatten_pool(const Var<T>& s, Normalization norm) {
  require_rank(s.shape(), 4, "flatten_pool");
  const std::size_t n = s.shape()[0], f = s.shape()[1], c = s.shape()[2];
  if (s.shape()[3] != c) throw ShapeError("flatten_pool: S must be square, got " + shape_str(s.shape()));
  const auto& sv = s.value();
  for (std::size_t m = 0; m < n * f; ++m)
    for (std::size_t i = 0; i < c; ++i)
      for (std::size_t j = i + 1; j < c; ++j) {
        const T a = sv[m * c * c + i * c + j], b = sv[m * c * c + j * c + i];
        if (std::abs(a - b) > static_cast<T>(kSymmetryTolerance))
          throw Error("flatten_pool: S is not symmetric at (" + std::to_string(i) + "," +
                      std::to_string(j) + "): " + std::to_string(a) + " vs " + std::to_string(b));
      }
  const std::size_t first_offset = norm == Normalization::kMeanAndVar ? 1 : 0;
  std::vector<std::size_t> index;  // positions inside one c x c block
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = i + first_offset; j < c; ++j)
      index.push_back(flatten_corruption_hook() ? j * c + i + (i + 1 < c ? 1 : 0) : i * c + j);
  const std::size_t tri = index.size(), dp = f * tri;
  Tensor<T> out(Shape{n, dp});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t r = 0; r < f; ++r)
      for (std::size_t k = 0; k < tri; ++k)
        out[b * dp + r * tri + k] = sv[(b * f + r) * c * c + index[k]];
  const std::size_t is = s.id();
  return s.tape().record(std::move(out), {s}, [=](Tape<T>& tp, std::size_t self) {
    const auto& g = tp.grad(self);
    auto& gs = tp.grad(is);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t r = 0; r < f; ++r)
        for (std::size_t k = 0; k < tri; ++k)
          gs[(b * f + r) * c * c + index[k]] += g[b * dp + r * tri + k];
  }, "flatten_pool");
}

/// Runs the full pooling stage and the embedding layer on Y[N, T, F, C],
/// returning [N, d_e]. `reduction` may be null for the statistics-only
/// modes. `rng` drives channel dropout and is consumed only when `training`
/// is set.
template <Real T>
Var<T> extract_embedding(const Var<T>& y, const PoolingConfig& cfg, const Var<T>* reduction,
                         const Var<T>& embed_weight, const Var<T>& embed_bias, bool training,
                         std::mt19937_64& rng) {
  require_rank(y.shape(), 4, "extract_embedding");
  std::vector<Var<T>> parts;
  if (cfg.uses_correlation()) {
    Var<T> h = channel_dropout(y, cfg.dropout_p, rng, training);
    h = freq_range_reshape(h, cfg.f_merge);
    if (!reduction) throw ConfigError("correlation pooling needs a channel reduction tensor");
    h = channel_reduce(h, *reduction);
    h = time_normalize(h, cfg.normalization);
    h = corr_pool(h);
    parts.push_back(flatten_pool(h, cfg.normalization));
  }
  if (cfg.mode != PoolingMode::kCorrelation)
    parts.push_back(stat_pool(y, cfg.mode != PoolingMode::kBaselineMean));
  Var<T> pooled = parts.size() == 1 ? parts.front() : ops::concat_features(parts);
  return ops::linear(pooled, embed_weight, &embed_bias);
}

}  // namespace corrpool
