// corrpool/verify/oracles.hpp


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


// Reference implementations written as plain loops straight from the
// definitions. They share no code with the differentiable ops and exist only
// to check them.

#pragma once

#include <limits>
#include <map>
#include <random>

#include "corrpool/eval.hpp"
#include "corrpool/pooling.hpp"

namespace corrpool::oracle {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> nd(0.0, scale);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

/// "Same" cross-correlation: out = ceil(in / stride) along each axis, with
/// max((out - 1) s + k - in, 0) padding split floor/ceil before/after.
inline Tensor<double> conv2d(const Tensor<double>& x, const Tensor<double>& k, std::size_t sh, std::size_t sw) {
  const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), ci = x.dim(3);
  const std::size_t kh = k.dim(0), kw = k.dim(1), co = k.dim(3);
  const std::size_t ho = (h + sh - 1) / sh, wo = (w + sw - 1) / sw;
  const long ph = std::max<long>(static_cast<long>((ho - 1) * sh + kh) - static_cast<long>(h), 0) / 2;
  const long pw = std::max<long>(static_cast<long>((wo - 1) * sw + kw) - static_cast<long>(w), 0) / 2;
  Tensor<double> out(Shape{n, ho, wo, co});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < ho; ++i)
      for (std::size_t j = 0; j < wo; ++j)
        for (std::size_t o = 0; o < co; ++o) {
          double acc = 0.0;
          for (std::size_t di = 0; di < kh; ++di)
            for (std::size_t dj = 0; dj < kw; ++dj) {
              const long yi = static_cast<long>(i * sh + di) - ph, xj = static_cast<long>(j * sw + dj) - pw;
              if (yi < 0 || xj < 0 || yi >= static_cast<long>(h) || xj >= static_cast<long>(w)) continue;
              for (std::size_t c = 0; c < ci; ++c)
                acc += x.at(b, static_cast<std::size_t>(yi), static_cast<std::size_t>(xj), c) * k.at(di, dj, c, o);
            }
          out.at(b, i, j, o) = acc;
        }
  return out;
}

/// Training-mode batch norm over all but the last axis, population variance.
inline Tensor<double> batch_norm(const Tensor<double>& x, const Tensor<double>& gamma, const Tensor<double>& beta,
                                 double eps) {
  const std::size_t c = x.shape().back(), m = x.size() / c;
  Tensor<double> out(x.shape());
  for (std::size_t k = 0; k < c; ++k) {
    double mu = 0.0, var = 0.0;
    for (std::size_t r = 0; r < m; ++r) mu += x[r * c + k];
    mu /= static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r) var += (x[r * c + k] - mu) * (x[r * c + k] - mu);
    var /= static_cast<double>(m);
    for (std::size_t r = 0; r < m; ++r) out[r * c + k] = gamma[k] * (x[r * c + k] - mu) / std::sqrt(var + eps) + beta[k];
  }
  return out;
}

/// Per-range correlation matrices S[N, F_r, C', C'] built from Y[N, T, F, C]
/// by direct summation: the samples of range r are all (t, sub-bin) pairs,
/// each reduced with L_r (or shared L), normalized along those samples.
inline Tensor<double> correlation_matrices(const Tensor<double>& y, const PoolingConfig& cfg, const Tensor<double>& l) {
  const std::size_t n = y.dim(0), t = y.dim(1), f = y.dim(2), c = y.dim(3);
  const std::size_t fr = f / cfg.f_merge, cr = cfg.c_reduced, ns = t * cfg.f_merge;
  const bool shared = l.rank() == 2;
  const double eps = sqrt_epsilon<double>();
  Tensor<double> s(Shape{n, fr, cr, cr});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t r = 0; r < fr; ++r) {
      std::vector<std::vector<double>> z(ns, std::vector<double>(cr, 0.0));
      for (std::size_t j = 0; j < cfg.f_merge; ++j)
        for (std::size_t tt = 0; tt < t; ++tt)
          for (std::size_t o = 0; o < cr; ++o)
            for (std::size_t k = 0; k < c; ++k)
              z[j * t + tt][o] += y.at(b, tt, r * cfg.f_merge + j, k) * (shared ? l.at(k, o) : l.at(r, k, o));
      for (std::size_t o = 0; o < cr; ++o) {
        double mu = 0.0, var = 0.0;
        for (std::size_t q = 0; q < ns; ++q) mu += z[q][o];
        mu /= static_cast<double>(ns);
        for (std::size_t q = 0; q < ns; ++q) var += (z[q][o] - mu) * (z[q][o] - mu);
        var /= static_cast<double>(ns);
        const double div = cfg.normalization == Normalization::kMeanAndVar ? std::sqrt(var + eps) : 1.0;
        for (std::size_t q = 0; q < ns; ++q) z[q][o] = (z[q][o] - mu) / div;
      }
      for (std::size_t a = 0; a < cr; ++a)
        for (std::size_t bb = 0; bb < cr; ++bb) {
          double acc = 0.0;
          for (std::size_t q = 0; q < ns; ++q) acc += z[q][a] * z[q][bb];
          s.at(b, r, a, bb) = acc / static_cast<double>(ns);
        }
    }
  return s;
}

/// Upper triangle of every S_f, row-major, ranges in order; the diagonal is
/// included only for mean_only.
inline Tensor<double> flatten_upper(const Tensor<double>& s, Normalization norm) {
  const std::size_t n = s.dim(0), fr = s.dim(1), c = s.dim(2);
  std::vector<double> v;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t r = 0; r < fr; ++r)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = i; j < c; ++j)
          if (j > i || norm == Normalization::kMeanOnly) v.push_back(s.at(b, r, i, j));
  const std::size_t d = v.size() / n;
  return Tensor<double>(Shape{n, d}, std::move(v));
}

/// Mean over time of each (f, c), then sqrt(var + eps) of each (f, c).
inline Tensor<double> stat_pool(const Tensor<double>& y, bool with_std) {
  const std::size_t n = y.dim(0), t = y.dim(1), f = y.dim(2), c = y.dim(3), fc = f * c;
  Tensor<double> out(Shape{n, with_std ? 2 * fc : fc});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t q = 0; q < fc; ++q) {
      double mu = 0.0, var = 0.0;
      for (std::size_t tt = 0; tt < t; ++tt) mu += y[(b * t + tt) * fc + q];
      mu /= static_cast<double>(t);
      for (std::size_t tt = 0; tt < t; ++tt) var += std::pow(y[(b * t + tt) * fc + q] - mu, 2);
      var /= static_cast<double>(t);
      out[b * out.dim(1) + q] = mu;
      if (with_std) out[b * out.dim(1) + fc + q] = std::sqrt(var + sqrt_epsilon<double>());
    }
  return out;
}

/// Gram matrix of one example over both time and frequency: 1/(T F) times
/// the sum over (t, f) of y y^T, with y centered per channel over (t, f).
inline Tensor<double> gram_time_freq(const Tensor<double>& y, std::size_t b) {
  const std::size_t t = y.dim(1), f = y.dim(2), c = y.dim(3);
  std::vector<double> mu(c, 0.0);
  for (std::size_t tt = 0; tt < t; ++tt)
    for (std::size_t ff = 0; ff < f; ++ff)
      for (std::size_t k = 0; k < c; ++k) mu[k] += y.at(b, tt, ff, k) / static_cast<double>(t * f);
  Tensor<double> g(Shape{c, c});
  for (std::size_t tt = 0; tt < t; ++tt)
    for (std::size_t ff = 0; ff < f; ++ff)
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j)
          g.at(i, j) += (y.at(b, tt, ff, i) - mu[i]) * (y.at(b, tt, ff, j) - mu[j]) / static_cast<double>(t * f);
  return g;
}

/// Mean AAM cross-entropy, computed from angles: logit_y = s cos(theta_y + m),
/// other logits s cos(theta_j).
inline double aam_loss(const Tensor<double>& emb, const std::vector<std::size_t>& labels, const Tensor<double>& head,
                       double margin, double scale) {
  const std::size_t n = emb.dim(0), d = emb.dim(1), k = head.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double en = 0.0;
    for (std::size_t i = 0; i < d; ++i) en += emb.at(r, i) * emb.at(r, i);
    std::vector<double> logit(k);
    for (std::size_t j = 0; j < k; ++j) {
      double wn = 0.0, dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        wn += head.at(i, j) * head.at(i, j);
        dot += emb.at(r, i) * head.at(i, j);
      }
      const double cosv = std::clamp(dot / std::sqrt(en * wn), -1.0 + 1e-7, 1.0 - 1e-7);
      logit[j] = scale * (j == labels[r] ? std::cos(std::acos(cosv) + margin) : cosv);
    }
    double z = 0.0;
    const double mx = *std::max_element(logit.begin(), logit.end());
    for (double v : logit) z += std::exp(v - mx);
    total += mx + std::log(z) - logit[labels[r]];
  }
  return total / static_cast<double>(n);
}

/// Mean softmax cross-entropy of explicit logits [N, K].
inline double softmax_cross_entropy(const Tensor<double>& logits, const std::vector<std::size_t>& labels) {
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(logits.at(r, j));
    total += std::log(z) - logits.at(r, labels[r]);
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Detection metrics by exhaustive counting.

struct BruteMetrics {
  double eer = 0.0;
  double min_dcf = 0.0;
  std::vector<std::pair<double, double>> points;  // (p_fa, p_miss), ascending threshold
};

/// Every distinct score and one value above all of them serve as thresholds;
/// each operating point is recounted over the full score list.
inline BruteMetrics brute_force_metrics(const ScoreSet& scores, const DcfParams& p) {
  std::vector<double> thr;
  for (const auto& s : scores) thr.push_back(s.score);
  std::sort(thr.begin(), thr.end());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  thr.push_back(std::numeric_limits<double>::infinity());
  double n_tgt = 0, n_non = 0;
  for (const auto& s : scores) (s.trial.target ? n_tgt : n_non) += 1;
  BruteMetrics out;
  out.min_dcf = std::numeric_limits<double>::infinity();
  const double norm = std::min(p.c_miss * p.p_target, p.c_fa * (1 - p.p_target));
  for (double tau : thr) {
    double miss = 0, fa = 0;
    for (const auto& s : scores) {
      if (s.trial.target && s.score < tau) miss += 1;
      if (!s.trial.target && s.score >= tau) fa += 1;
    }
    out.points.emplace_back(fa / n_non, miss / n_tgt);
    const double cost = (p.c_miss * p.p_target * miss / n_tgt + p.c_fa * (1 - p.p_target) * fa / n_non) / norm;
    out.min_dcf = std::min(out.min_dcf, cost);
  }
  for (std::size_t i = 1; i < out.points.size(); ++i) {
    const double d1 = out.points[i].second - out.points[i].first;
    if (d1 < 0) continue;
    const double d0 = out.points[i - 1].second - out.points[i - 1].first;
    const double a = d1 == d0 ? 0.0 : -d0 / (d1 - d0);
    out.eer = out.points[i - 1].second + a * (out.points[i].second - out.points[i - 1].second);
    break;
  }
  return out;
}

}  // namespace corrpool::oracle
