// corrpool/verify/acceptance.hpp


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


// Acceptance checks. Each check_* function runs one criterion end to end and
// reports a CheckResult; the acceptance test binary and `corrpool selftest`
// both drive them through run_suite().

#pragma once

#include <chrono>
#include <functional>
#include <iomanip>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "corrpool/grad_check.hpp"
#include "corrpool/pipeline.hpp"
#include "corrpool/verify/oracles.hpp"

namespace corrpool::verify {

struct CheckResult {
  std::string id;
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

inline std::string fmt(double v, int prec = 3) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

/// sum(v * W) for a fixed pseudo-random W, so every output entry carries a
/// distinct weight in the gradient.
inline Var<double> weighted_sum(const Var<double>& v, std::uint64_t salt = 0) {
  std::mt19937_64 rng(0x5eed0000 + salt);
  return ops::sum(ops::mul(v, v.tape().constant(oracle::random_tensor(v.shape(), rng))));
}

template <typename F>
CheckResult timed(std::string id, std::string name, F&& body) {
  CheckResult r{std::move(id), std::move(name), false, {}, 0.0};
  const auto t0 = std::chrono::steady_clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("exception: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline Tensor<double> positive(Tensor<double> t, double floor) {
  for (auto& v : t.values()) v = std::abs(v) + floor;
  return t;
}

/// Tiny ResNet used wherever a full backbone is needed in a unit-sized check.
inline ResNetConfig tiny_resnet() {
  ResNetConfig c;
  c.stem_channels = 4;
  c.stage_blocks = {1, 1, 1, 1};
  c.stage_channels = {4, 4, 6, 6};
  c.input_dim = 8;
  return c;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// 1. Gradients

struct GradCase {
  std::string name;
  double tolerance;
  std::vector<Tensor<double>> inputs;
  std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> f;
  GradCheckOptions opts;
};

inline std::vector<GradCase> gradient_cases() {
  using V = std::vector<Var<double>>;
  using oracle::random_tensor;
  constexpr double kLinear = 1e-6, kSmooth = 1e-4;
  std::mt19937_64 rng(2024);
  auto r = [&](Shape s) { return random_tensor(std::move(s), rng); };
  auto ws = [](const Var<double>& v) { return detail::weighted_sum(v); };
  std::vector<GradCase> cs;

  cs.push_back({"add", kLinear, {r({3, 4}), r({3, 4})}, [=](Tape<double>&, const V& x) { return ws(ops::add(x[0], x[1])); }, {}});
  cs.push_back({"mul", kLinear, {r({3, 4}), r({3, 4})}, [=](Tape<double>&, const V& x) { return ws(ops::mul(x[0], x[1])); }, {}});
  cs.push_back({"scale", kLinear, {r({5})}, [=](Tape<double>&, const V& x) { return ws(ops::scale(x[0], -1.7)); }, {}});
  cs.push_back({"sum", kLinear, {r({2, 3, 2})}, [](Tape<double>&, const V& x) { return ops::sum(x[0]); }, {}});
  {
    GradCheckOptions o;
    o.skip = [h = o.h](std::size_t, std::size_t, double v) { return std::abs(v) < 10 * h; };
    cs.push_back({"relu", kSmooth, {r({4, 5})}, [=](Tape<double>&, const V& x) { return ws(ops::relu(x[0])); }, o});
  }
  cs.push_back({"reshape", kLinear, {r({2, 6})},
                [=](Tape<double>&, const V& x) { return ws(ops::reshape(x[0], Shape{3, 4})); }, {}});
  cs.push_back({"concat_features", kLinear, {r({2, 3}), r({2, 5})},
                [=](Tape<double>&, const V& x) { return ws(ops::concat_features<double>({x[0], x[1]})); }, {}});
  cs.push_back({"linear", kLinear, {r({3, 5}), r({5, 4}), r({4})},
                [=](Tape<double>&, const V& x) { return ws(ops::linear(x[0], x[1], &x[2])); }, {}});
  cs.push_back({"matmul", kLinear, {r({3, 5}), r({5, 2})},
                [=](Tape<double>&, const V& x) { return ws(ops::matmul(x[0], x[1])); }, {}});
  cs.push_back({"conv2d 3x3 stride 1", kLinear, {r({2, 5, 6, 3}), r({3, 3, 3, 4})},
                [=](Tape<double>&, const V& x) { return ws(ops::conv2d(x[0], x[1])); }, {}});
  cs.push_back({"conv2d 3x3 stride 2", kLinear, {r({2, 7, 6, 2}), r({3, 3, 2, 3})},
                [=](Tape<double>&, const V& x) { return ws(ops::conv2d(x[0], x[1], ops::Stride2{2, 2})); }, {}});
  cs.push_back({"conv2d 1x1 stride 2", kLinear, {r({1, 5, 4, 3}), r({1, 1, 3, 2})},
                [=](Tape<double>&, const V& x) { return ws(ops::conv2d(x[0], x[1], ops::Stride2{2, 2})); }, {}});
  cs.push_back({"batch_norm train", kSmooth, {r({2, 4, 3, 3}), r({3}), r({3})}, [=](Tape<double>&, const V& x) {
                  ops::BatchNormStats<double> none;
                  return ws(ops::batch_norm(x[0], x[1], x[2], none, ops::BnMode::kTrain));
                }, {}});
  {
    ops::BatchNormStats<double> st{r({3}), detail::positive(r({3}), 0.5), true};
    cs.push_back({"batch_norm eval", kLinear, {r({2, 3, 2, 3}), r({3}), r({3})}, [=](Tape<double>&, const V& x) {
                    return ws(ops::batch_norm(x[0], x[1], x[2], st, ops::BnMode::kEval));
                  }, {}});
  }
  cs.push_back({"reduce_moments", kLinear, {r({2, 5, 3})}, [=](Tape<double>&, const V& x) {
                  auto [m, v] = ops::reduce_moments(x[0], 1);
                  return ops::add(ws(m), detail::weighted_sum(v, 1));
                }, {}});
  cs.push_back({"sqrt_eps", kSmooth, {detail::positive(r({6}), 0.1)},
                [=](Tape<double>&, const V& x) { return ws(ops::sqrt_eps(x[0], 1e-8)); }, {}});
  cs.push_back({"l2_normalize rows", kSmooth, {r({3, 4})},
                [=](Tape<double>&, const V& x) { return ws(ops::l2_normalize(x[0], 1e-12, 1)); }, {}});
  cs.push_back({"l2_normalize columns", kSmooth, {r({4, 3})},
                [=](Tape<double>&, const V& x) { return ws(ops::l2_normalize(x[0], 1e-12, 0)); }, {}});
  {
    std::mt19937_64 mr(5);
    const Tensor<double> mask = sample_channel_mask<double>(2, 4, 0.25, mr);
    cs.push_back({"channel_mask", kLinear, {r({2, 3, 2, 4})},
                  [=](Tape<double>&, const V& x) { return ws(ops::channel_mask(x[0], mask)); }, {}});
  }
  cs.push_back({"stat_pool", kSmooth, {r({2, 6, 3, 2})},
                [=](Tape<double>&, const V& x) { return ws(stat_pool(x[0])); }, {}});
  cs.push_back({"freq_range_reshape", kLinear, {r({2, 3, 4, 2})},
                [=](Tape<double>&, const V& x) { return ws(freq_range_reshape(x[0], 2)); }, {}});
  cs.push_back({"channel_reduce per-frequency", kLinear, {r({2, 5, 3, 4}), r({3, 4, 2})},
                [=](Tape<double>&, const V& x) { return ws(channel_reduce(x[0], x[1])); }, {}});
  cs.push_back({"channel_reduce shared", kLinear, {r({2, 5, 3, 4}), r({4, 3})},
                [=](Tape<double>&, const V& x) { return ws(channel_reduce(x[0], x[1])); }, {}});
  cs.push_back({"time_normalize mean_only", kLinear, {r({2, 6, 2, 3})},
                [=](Tape<double>&, const V& x) { return ws(time_normalize(x[0], Normalization::kMeanOnly)); }, {}});
  cs.push_back({"time_normalize mean_and_var", kSmooth, {r({2, 6, 2, 3})},
                [=](Tape<double>&, const V& x) { return ws(time_normalize(x[0], Normalization::kMeanAndVar)); }, {}});
  cs.push_back({"corr_pool", kLinear, {r({2, 5, 2, 3})},
                [=](Tape<double>&, const V& x) { return ws(corr_pool(x[0])); }, {}});
  cs.push_back({"flatten_pool mean_and_var", kLinear, {r({2, 5, 2, 4})}, [=](Tape<double>&, const V& x) {
                  return ws(flatten_pool(corr_pool(x[0]), Normalization::kMeanAndVar));
                }, {}});
  cs.push_back({"flatten_pool mean_only", kLinear, {r({2, 5, 2, 4})}, [=](Tape<double>&, const V& x) {
                  return ws(flatten_pool(corr_pool(x[0]), Normalization::kMeanOnly));
                }, {}});
  {
    Tensor<double> cosv(Shape{4, 5});
    std::uniform_real_distribution<double> u(-0.9, 0.9);
    for (auto& v : cosv.values()) v = u(rng);
    const std::vector<std::size_t> labels{0, 3, 4, 1};
    cs.push_back({"aam_logits", kSmooth, {cosv}, [=](Tape<double>&, const V& x) {
                    return ws(aam_logits<double>(x[0], labels, 0.2, 30.0));
                  }, {}});
    cs.push_back({"softmax_cross_entropy", kSmooth, {r({4, 5})}, [=](Tape<double>&, const V& x) {
                    return softmax_cross_entropy<double>(x[0], labels);
                  }, {}});
    // A wide embedding keeps the scaled cosines small, so no row of the
    // softmax saturates.
    cs.push_back({"aam_loss", kSmooth, {r({4, 64}), r({64, 5})}, [=](Tape<double>&, const V& x) {
                    return aam_loss<double>(x[0], labels, x[1], 0.2, 30.0).loss;
                  }, {}});
  }

  // extract_embedding + aam_loss over every pooling mode; dropout is on,
  // with the mask fixed by reseeding inside each evaluation.
  struct Composite {
    std::string name;
    PoolingConfig cfg;
  };
  std::vector<Composite> composites;
  {
    PoolingConfig p;
    p.c_reduced = 3;
    p.f_merge = 2;
    p.embed_dim = 64;
    composites.push_back({"composite correlation per-frequency mean_and_var", p});
    p.normalization = Normalization::kMeanOnly;
    p.reduction_kind = ReductionKind::kShared2d;
    composites.push_back({"composite correlation shared mean_only", p});
    p.mode = PoolingMode::kCombined;
    p.normalization = Normalization::kMeanAndVar;
    composites.push_back({"composite combined", p});
    p.mode = PoolingMode::kBaselineMeanStd;
    composites.push_back({"composite baseline_meanstd", p});
  }
  const std::vector<std::size_t> labels{1, 0, 2};
  for (const auto& c : composites) {
    const std::size_t f = 4, ch = 5;
    std::mt19937_64 init(9);
    PoolParams<double> pp = init_pool_params<double>(c.cfg, f, ch, init);
    std::vector<Tensor<double>> in{r({3, 6, f, ch}), pp.embed_weight, r({c.cfg.embed_dim}), r({c.cfg.embed_dim, 3})};
    if (c.cfg.uses_correlation()) in.push_back(pp.reduction);
    const PoolingConfig cfg = c.cfg;
    cs.push_back({c.name, kSmooth, in, [=](Tape<double>&, const V& x) {
                    std::mt19937_64 drop(17);
                    const Var<double>* red = x.size() > 4 ? &x[4] : nullptr;
                    Var<double> e = extract_embedding(x[0], cfg, red, x[1], x[2], true, drop);
                    return aam_loss<double>(e, labels, x[3], 0.2, 30.0).loss;
                  }, {}});
  }

  // Backbone + pooling + loss, differentiated with respect to every learnable
  // model tensor (a strided subset of coordinates of each).
  {
    const ResNetConfig rc = detail::tiny_resnet();
    PoolingConfig pc;
    pc.mode = PoolingMode::kBaselineMeanStd;
    pc.embed_dim = 32;
    pc.dropout_p = 0.0;
    auto model = std::make_shared<Model<double>>(init_model<double>(rc, pc, 3, 3));
    auto feats = std::make_shared<Tensor<double>>(r({3, 16, 8}));
    std::vector<Tensor<double>> in;
    visit_model(*model, [&](const std::string&, const Tensor<double>& t, bool learnable) {
      if (learnable) in.push_back(t);
    });
    GradCheckOptions o;
    o.max_coords = 12;
    cs.push_back({"composite backbone + pooling + aam_loss", kSmooth, in, [=](Tape<double>& tape, const V& x) {
                    Model<double> m = *model;
                    ParamBinder<double> bind(tape, false);
                    std::size_t i = 0;
                    visit_model(m, [&](const std::string&, const Tensor<double>& t, bool learnable) {
                      if (learnable) bind.alias(t, x[i++]);
                    });
                    std::mt19937_64 drop(1);
                    Var<double> e = model_embed(tape.constant(*feats), m, ops::BnMode::kTrain, drop, bind);
                    return aam_loss<double>(e, labels, bind(m.head), 0.2, 30.0).loss;
                  }, o});
  }
  return cs;
}

inline CheckResult check_gradients() {
  return detail::timed("1", "gradient suite (64-bit central differences)", [](CheckResult& r) {
    std::size_t failed = 0, coords = 0;
    std::string worst, failures;
    double worst_ratio = -1;
    for (const auto& c : gradient_cases()) {
      const auto g = grad_check(c.f, c.inputs, c.opts);
      coords += g.checked;
      const double ratio = g.max_rel_error / c.tolerance;
      if (ratio > worst_ratio) {
        worst_ratio = ratio;
        worst = c.name + " " + detail::fmt(g.max_rel_error) + " (tol " + detail::fmt(c.tolerance) + ")";
      }
      if (!(g.max_rel_error < c.tolerance) || g.checked == 0) {
        ++failed;
        failures += "; FAIL " + c.name + " err " + detail::fmt(g.max_rel_error) + " at input " +
                    std::to_string(g.worst_input) + "[" + std::to_string(g.worst_index) + "]";
      }
    }
    r.passed = failed == 0;
    r.detail = std::to_string(coords) + " coordinates, worst " + worst + failures;
  });
}

// ---------------------------------------------------------------------------
// 2. Correlation-pooling invariants

struct InvariantStats {
  std::size_t inputs = 0;
  std::size_t asymmetric = 0;
  double min_eigenvalue = std::numeric_limits<double>::infinity();
  double max_diag_dev = 0.0;  // mean_and_var only
  double max_abs_entry = 0.0;  // mean_and_var only
  double max_perm_diff = 0.0;
  double max_oracle_diff = 0.0;
  std::size_t flatten_mismatches = 0;
};

/// Random inputs through every pipeline stage for one (f_r, normalization).
inline InvariantStats correlation_invariants(std::size_t f_r, Normalization norm, std::size_t n_inputs,
                                             std::uint64_t seed) {
  constexpr std::size_t kF = 4, kC = 6;
  PoolingConfig cfg;
  cfg.c_reduced = 4;
  cfg.f_merge = f_r;
  cfg.normalization = norm;
  cfg.embed_dim = 5;
  std::mt19937_64 rng(seed);
  InvariantStats st;
  for (std::size_t it = 0; it < n_inputs; ++it) {
    const std::size_t t = std::uniform_int_distribution<std::size_t>(4, 12)(rng);
    const Tensor<double> y = oracle::random_tensor(Shape{1, t, kF, kC}, rng);
    const PoolParams<double> pp = init_pool_params<double>(cfg, kF, kC, rng);
    Tape<double> tape;
    Var<double> yv = tape.constant(y), lv = tape.constant(pp.reduction);
    Var<double> s = corr_pool(time_normalize(channel_reduce(freq_range_reshape(yv, f_r), lv), norm));
    const auto& sv = s.value();
    const std::size_t fr = kF / f_r, c = cfg.c_reduced;
    for (std::size_t r = 0; r < fr; ++r) {
      Eigen::MatrixXd m(c, c);
      for (std::size_t i = 0; i < c; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const double a = sv[(r * c + i) * c + j];
          m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = a;
          if (a != sv[(r * c + j) * c + i]) ++st.asymmetric;
          if (norm == Normalization::kMeanAndVar) {
            st.max_abs_entry = std::max(st.max_abs_entry, std::abs(a));
            if (i == j) st.max_diag_dev = std::max(st.max_diag_dev, std::abs(a - 1.0));
          }
        }
      st.min_eigenvalue = std::min(st.min_eigenvalue, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues().minCoeff());
    }
    const Tensor<double> ref = oracle::correlation_matrices(y, cfg, pp.reduction);
    for (std::size_t k = 0; k < sv.size(); ++k) st.max_oracle_diff = std::max(st.max_oracle_diff, std::abs(sv[k] - ref[k]));

    const Tensor<double> flat = flatten_pool(s, norm).value();
    const Tensor<double> upper = oracle::flatten_upper(s.value(), norm);
    if (flat.shape() != upper.shape() || !std::equal(flat.values().begin(), flat.values().end(), upper.values().begin()))
      ++st.flatten_mismatches;

    std::vector<std::size_t> perm(t);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    Tensor<double> yp(y.shape());
    for (std::size_t tt = 0; tt < t; ++tt)
      std::copy_n(y.data() + perm[tt] * kF * kC, kF * kC, yp.data() + tt * kF * kC);
    auto embed = [&](const Tensor<double>& in) {
      Tape<double> tp;
      std::mt19937_64 unused(0);
      const Var<double> red = tp.constant(pp.reduction);
      return extract_embedding(tp.constant(in), cfg, &red, tp.constant(pp.embed_weight), tp.constant(pp.embed_bias),
                               false, unused).value();
    };
    const Tensor<double> e0 = embed(y), e1 = embed(yp);
    for (std::size_t k = 0; k < e0.size(); ++k) st.max_perm_diff = std::max(st.max_perm_diff, std::abs(e0[k] - e1[k]));
    ++st.inputs;
  }
  return st;
}

inline CheckResult check_correlation_invariants(std::size_t n_inputs = 100) {
  return detail::timed("2", "correlation pooling invariants", [&](CheckResult& r) {
    bool ok = true;
    std::ostringstream d;
    std::size_t total = 0;
    double min_eig = std::numeric_limits<double>::infinity(), diag = 0, entry = 0, perm = 0, orc = 0;
    std::uint64_t seed = 100;
    for (std::size_t f_r : {std::size_t{1}, std::size_t{2}, std::size_t{4}})
      for (Normalization norm : {Normalization::kMeanOnly, Normalization::kMeanAndVar}) {
        const auto st = correlation_invariants(f_r, norm, n_inputs, seed++);
        total += st.inputs;
        const bool mav = norm == Normalization::kMeanAndVar;
        const bool pass = st.asymmetric == 0 && st.min_eigenvalue >= -1e-6 && st.max_perm_diff <= 1e-6 &&
                          st.flatten_mismatches == 0 && st.max_oracle_diff <= 1e-10 &&
                          (!mav || (st.max_diag_dev <= 1e-5 && st.max_abs_entry <= 1 + 1e-5));
        if (!pass) {
          ok = false;
          d << " FAIL f_r=" << f_r << " " << to_string(norm) << " (asym " << st.asymmetric << ", flatten mismatches "
            << st.flatten_mismatches << ", min eig " << st.min_eigenvalue << ", perm " << st.max_perm_diff << ")";
        }
        min_eig = std::min(min_eig, st.min_eigenvalue);
        if (mav) {
          diag = std::max(diag, st.max_diag_dev);
          entry = std::max(entry, st.max_abs_entry);
        }
        perm = std::max(perm, st.max_perm_diff);
        orc = std::max(orc, st.max_oracle_diff);
      }
    r.passed = ok;
    r.detail = std::to_string(total) + " inputs x 6 configs; min eig " + detail::fmt(min_eig) + ", diag dev " +
               detail::fmt(diag) + ", max |S| " + detail::fmt(entry, 8) + ", perm diff " + detail::fmt(perm) +
               ", oracle diff " + detail::fmt(orc) + d.str();
  });
}

/// Negative control: with the flatten ordering corrupted the invariant check
/// must fail. Passes when the failure is detected.
inline CheckResult check_negative_control() {
  return detail::timed("neg", "corrupted flatten ordering is rejected", [](CheckResult& r) {
    flatten_corruption_hook() = true;
    InvariantStats st;
    try {
      st = correlation_invariants(2, Normalization::kMeanAndVar, 5, 77);
    } catch (...) {
      flatten_corruption_hook() = false;
      throw;
    }
    flatten_corruption_hook() = false;
    r.passed = st.flatten_mismatches == st.inputs && st.inputs > 0;
    r.detail = "flatten/upper-triangle mismatch on " + std::to_string(st.flatten_mismatches) + " of " +
               std::to_string(st.inputs) + " inputs";
  });
}

// ---------------------------------------------------------------------------
// 3. Dimension formulas

inline CheckResult check_dimensions() {
  return detail::timed("3", "flatten dimension formulas", [](CheckResult& r) {
    std::size_t configs = 0;
    std::string bad;
    std::size_t d_10080 = 0, d_8256 = 0;
    for (std::size_t fr : {1, 2, 5, 10})
      for (std::size_t c : {2, 3, 16, 64, 128})
        for (Normalization norm : {Normalization::kMeanAndVar, Normalization::kMeanOnly}) {
          std::size_t enumerated = 0;
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = i; j < c; ++j) enumerated += (j > i || norm == Normalization::kMeanOnly);
          enumerated *= fr;
          const std::size_t formula = norm == Normalization::kMeanAndVar ? fr * c * (c - 1) / 2 : fr * c * (c + 1) / 2;
          PoolingConfig cfg;
          cfg.c_reduced = c;
          cfg.f_merge = 10 / fr;
          cfg.normalization = norm;
          const std::size_t pooled = pooled_dim(cfg, 10, 256);
          Tape<double> tape;
          Tensor<double> s(Shape{1, fr, c, c});
          for (std::size_t k = 0; k < fr; ++k)
            for (std::size_t i = 0; i < c; ++i) s.at(0, k, i, i) = 1.0;
          const std::size_t flat = flatten_pool(tape.constant(std::move(s)), norm).value().dim(1);
          if (enumerated != formula || pooled != formula || flat != formula)
            bad += " FAIL F_r=" + std::to_string(fr) + " C'=" + std::to_string(c) + " " + to_string(norm);
          if (fr == 5 && c == 64 && norm == Normalization::kMeanAndVar) d_10080 = flat;
          if (fr == 1 && c == 128 && norm == Normalization::kMeanOnly) d_8256 = flat;
          ++configs;
        }
    r.passed = bad.empty() && d_10080 == 10080 && d_8256 == 8256;
    r.detail = std::to_string(configs) + " configs; (5, 64, mean_and_var) -> " + std::to_string(d_10080) +
               ", (1, 128, mean_only) -> " + std::to_string(d_8256) + bad;
  });
}

// ---------------------------------------------------------------------------
// 4. Gram recovery

inline CheckResult check_gram_recovery() {
  return detail::timed("4", "Gram matrix recovery (f_r = F, mean_only, identity reduction)", [](CheckResult& r) {
    std::mt19937_64 rng(44);
    double worst = 0;
    for (int it = 0; it < 20; ++it) {
      const std::size_t t = 3 + static_cast<std::size_t>(it % 7), f = 2 + static_cast<std::size_t>(it % 3), c = 5;
      const Tensor<double> y = oracle::random_tensor(Shape{2, t, f, c}, rng, 2.0);
      Tensor<double> id(Shape{c, c});
      for (std::size_t i = 0; i < c; ++i) id.at(i, i) = 1.0;
      Tape<double> tape;
      Var<double> s = corr_pool(time_normalize(
          channel_reduce(freq_range_reshape(tape.constant(y), f), tape.constant(id)), Normalization::kMeanOnly));
      for (std::size_t b = 0; b < 2; ++b) {
        const Tensor<double> g = oracle::gram_time_freq(y, b);
        for (std::size_t k = 0; k < c * c; ++k) worst = std::max(worst, std::abs(s.value()[b * c * c + k] - g[k]));
      }
    }
    r.passed = worst <= 1e-10;
    r.detail = "20 inputs, max |S - Gram| = " + detail::fmt(worst);
  });
}

// ---------------------------------------------------------------------------
// 5. Shape parity at full size

inline CheckResult check_full_shapes() {
  return detail::timed("5", "full-size shapes", [](CheckResult& r) {
    const ResNetConfig rc = ResNetConfig::full();
    PoolingConfig p7;
    p7.c_reduced = 64;
    p7.f_merge = 2;
    Model<float> m = init_model<float>(rc, p7, 4, 1);
    Tape<float> tape;
    ParamBinder<float> bind(tape, false);
    std::mt19937_64 rng(3);
    Tensor<float> x(Shape{1, 400, 80, 1});
    std::normal_distribution<float> nd;
    for (auto& v : x.values()) v = nd(rng);
    const Var<float> y = backbone_forward(tape.constant(x), m.backbone, rc, ops::BnMode::kTrain, bind);
    const Shape ys = y.shape();
    const std::size_t stat = stat_pool(y).value().dim(1);
    const std::size_t dp = m.pool.embed_weight.dim(0);
    const Var<float> red = bind(m.pool.reduction);
    const Shape es = extract_embedding(y, p7, &red, bind(m.pool.embed_weight), bind(m.pool.embed_bias), false, rng).shape();
    r.passed = ys == Shape{1, 50, 10, 256} && stat == 5120 && dp == 10080 && es == Shape{1, 256};
    r.detail = "[400, 80, 1] -> " + shape_str(ys) + "; stat_pool " + std::to_string(stat) + "; P7 d_p " +
               std::to_string(dp) + ", embedding " + shape_str(es);
  });
}

// ---------------------------------------------------------------------------
// 6. Metric oracles

inline CheckResult check_metric_oracles() {
  return detail::timed("6", "EER / minDCF against brute force", [](CheckResult& r) {
    std::mt19937_64 rng(66);
    double worst = 0;
    std::size_t det_mismatch = 0;
    const DcfParams dcf;
    for (int set = 0; set < 50; ++set) {
      ScoreSet scores;
      std::normal_distribution<double> nd;
      const double shift = std::uniform_real_distribution<double>(0.0, 3.0)(rng);
      const double quant = set % 3 == 0 ? 0.05 : 0.0;  // every third set has heavy ties
      for (int i = 0; i < 1000; ++i) {
        const bool tgt = std::bernoulli_distribution(0.3)(rng);
        double s = nd(rng) + (tgt ? shift : 0.0);
        if (quant > 0) s = std::round(s / quant) * quant;
        scores.push_back({{"e", "t", tgt}, s});
      }
      const auto ref = oracle::brute_force_metrics(scores, dcf);
      worst = std::max({worst, std::abs(compute_eer(scores).eer - ref.eer),
                        std::abs(compute_min_dcf(scores, dcf).min_dcf - ref.min_dcf)});
      const auto pts = det_points(scores);
      if (pts.size() != ref.points.size()) {
        ++det_mismatch;
        continue;
      }
      for (std::size_t k = 0; k < pts.size(); ++k)
        if (std::abs(pts[k].p_fa - ref.points[k].first) > 1e-12 || std::abs(pts[k].p_miss - ref.points[k].second) > 1e-12) {
          ++det_mismatch;
          break;
        }
    }
    ScoreSet perfect, constant;
    for (int i = 0; i < 20; ++i) {
      perfect.push_back({{"e", "t", i % 2 == 0}, i % 2 == 0 ? 1.0 + i : -1.0 - i});
      constant.push_back({{"e", "t", i % 2 == 0}, 0.25});
    }
    const double pe = compute_eer(perfect).eer, pd = compute_min_dcf(perfect, dcf).min_dcf;
    const double cd = compute_min_dcf(constant, dcf).min_dcf;
    r.passed = worst <= 1e-9 && det_mismatch == 0 && pe == 0.0 && pd == 0.0 && cd == 1.0;
    r.detail = "50 sets x 1000 trials, max diff " + detail::fmt(worst) + ", DET mismatches " +
               std::to_string(det_mismatch) + "; perfect eer " + detail::fmt(pe) + " min_dcf " + detail::fmt(pd) +
               "; constant min_dcf " + detail::fmt(cd);
  });
}

// ---------------------------------------------------------------------------
// 7. AAM identity and microbatch accumulation

inline CheckResult check_aam_and_accumulation() {
  return detail::timed("7", "AAM margin-0 identity; microbatch accumulation", [](CheckResult& r) {
    std::mt19937_64 rng(77);
    const Tensor<double> emb = oracle::random_tensor(Shape{8, 6}, rng), head = oracle::random_tensor(Shape{6, 5}, rng);
    const std::vector<std::size_t> labels{0, 1, 2, 3, 4, 0, 2, 4};
    const double scale = 30.0;
    Tensor<double> logits(Shape{8, 5});
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        double dot = 0, ne = 0, nw = 0;
        for (std::size_t k = 0; k < 6; ++k) {
          dot += emb.at(i, k) * head.at(k, j);
          ne += emb.at(i, k) * emb.at(i, k);
          nw += head.at(k, j) * head.at(k, j);
        }
        logits.at(i, j) = scale * dot / std::sqrt(ne * nw);
      }
    Tape<double> tape;
    const double l0 = aam_loss<double>(tape.constant(emb), labels, tape.constant(head), 0.0, scale).loss.value()[0];
    const double ce = oracle::softmax_cross_entropy(logits, labels);
    const double l2 = aam_loss<double>(tape.constant(emb), labels, tape.constant(head), 0.2, scale).loss.value()[0];
    const double ref2 = oracle::aam_loss(emb, labels, head, 0.2, scale);

    // One SGD update from a full batch versus uneven microbatches, with
    // batch-norm statistics frozen and channel dropout active.
    PoolingConfig pc;
    pc.c_reduced = 3;
    pc.f_merge = 1;
    pc.embed_dim = 4;
    Model<double> base = init_model<double>(detail::tiny_resnet(), pc, 4, 12);
    {
      Tape<double> warm;
      ParamBinder<double> bind(warm, false);
      std::mt19937_64 unused(0);
      model_embed(warm.constant(oracle::random_tensor(Shape{4, 16, 8}, rng)), base, ops::BnMode::kTrain, unused, bind);
    }
    Batch<double> batch{oracle::random_tensor(Shape{7, 16, 8}, rng), {0, 1, 2, 3, 0, 1, 2}};
    auto update = [&](std::size_t micro) {
      Model<double> m = base;
      OptState<double> opt = init_opt_state(m);
      std::mt19937_64 drop(5);
      auto g = accumulate_gradients(m, batch, micro, 0.2, scale, drop, StepOptions{ops::BnMode::kEval});
      sgd_momentum_update(m, opt, g.grads, 0.2, 0.9);
      return std::make_pair(m, g.loss);
    };
    const auto [full, lf] = update(7);
    const auto [micro, lm] = update(3);
    double dmax = std::abs(lf - lm);
    std::vector<const Tensor<double>*> a, b;
    visit_model(full, [&](const std::string&, const Tensor<double>& t, bool) { a.push_back(&t); });
    visit_model(micro, [&](const std::string&, const Tensor<double>& t, bool) { b.push_back(&t); });
    for (std::size_t i = 0; i < a.size(); ++i)
      for (std::size_t k = 0; k < a[i]->size(); ++k) dmax = std::max(dmax, std::abs((*a[i])[k] - (*b[i])[k]));
    const double d0 = std::abs(l0 - ce), d2 = std::abs(l2 - ref2);
    r.passed = d0 <= 1e-10 && d2 <= 1e-10 && dmax <= 1e-6;
    r.detail = "|AAM(m=0) - CE| " + detail::fmt(d0) + ", |AAM(m=0.2) - oracle| " + detail::fmt(d2) +
               ", microbatch vs full-batch update " + detail::fmt(dmax);
  });
}

// ---------------------------------------------------------------------------
// 8. Desk-scale end-to-end experiment

/// Desk experiment configuration for one pooling system.
inline nlohmann::json desk_experiment_config(const std::string& mode) {
  return {{"seed", 11},
          {"resnet", {{"desk_preset", true}}},
          {"pooling", {{"mode", mode}, {"c_reduced", 16}, {"f_merge", 2}, {"normalization", "mean_and_var"}}},
          {"train",
           {{"minibatch", 16},
            {"microbatch", 8},
            {"total_steps", 2000},
            {"eval_cadence", 100},
            {"plateau_updates", 500},
            {"checkpoint_every", 500},
            {"crop_frames", 100}}}};
}

struct SystemResult {
  std::string mode;
  double eer = 1.0;
  double min_dcf = 1.0;
  double seconds = 0.0;
};

inline SystemResult run_desk_system(const std::filesystem::path& work, const std::string& mode, std::size_t jobs,
                                    std::ostream* progress) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = parse_run_config(desk_experiment_config(mode));
  const auto corpus = work / "corpus";
  if (!std::filesystem::exists(manifest_path(corpus))) run_synth(cfg, corpus, jobs);
  const auto dir = work / mode;
  const auto ckpt = run_train(cfg, corpus, dir / "train", std::nullopt, progress);
  const auto store = run_extract(ckpt, manifest_path(corpus), {"trial"}, jobs);
  const CorpusManifest m = load_manifest(manifest_path(corpus));
  const auto scores = score_trials(store, read_trials(m.resolve(m.trials)), jobs);
  write_scores(dir / "scores.txt", scores);
  const auto metrics = metrics_report(scores, cfg.dcf);
  write_json(dir / "metrics.json", metrics);
  return {mode, metrics["eer"], metrics["min_dcf"],
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

inline CheckResult check_end_to_end(const std::filesystem::path& work, std::size_t jobs, std::ostream* progress) {
  return detail::timed("8", "desk end-to-end: B1 and P7 below 15% EER in 30 min", [&](CheckResult& r) {
    std::filesystem::remove_all(work);
    const auto b1 = run_desk_system(work, "baseline_meanstd", jobs, progress);
    const auto p7 = run_desk_system(work, "correlation", jobs, progress);
    const double total = b1.seconds + p7.seconds;
    r.passed = b1.eer < 0.15 && p7.eer < 0.15 && total < 1800.0;
    r.detail = "B1 eer " + detail::fmt(b1.eer) + " min_dcf " + detail::fmt(b1.min_dcf) + "; P7 eer " +
               detail::fmt(p7.eer) + " min_dcf " + detail::fmt(p7.min_dcf) + "; " +
               (p7.eer < b1.eer ? "P7 < B1" : p7.eer > b1.eer ? "B1 < P7" : "B1 = P7") + " on EER (reported only); " +
               detail::fmt(total, 4) + " s";
  });
}

// ---------------------------------------------------------------------------
// 9. Determinism

inline nlohmann::json determinism_config() {
  return {{"seed", 5},
          {"resnet", {{"desk_preset", true}}},
          {"pooling", {{"mode", "correlation"}, {"c_reduced", 8}, {"f_merge", 2}}},
          {"train",
           {{"minibatch", 8},
            {"microbatch", 4},
            {"total_steps", 30},
            {"eval_cadence", 10},
            {"plateau_updates", 10},
            {"crop_frames", 50}}},
          {"synth",
           {{"n_train_speakers", 6},
            {"n_trial_speakers", 4},
            {"utts_per_speaker", 6},
            {"heldout_per_speaker", 1},
            {"min_duration_s", 1.0},
            {"max_duration_s", 1.5},
            {"n_target_trials", 20},
            {"n_nontarget_trials", 20}}}};
}

inline std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline CheckResult check_determinism(const std::filesystem::path& work) {
  return detail::timed("9", "determinism and resume", [&](CheckResult& r) {
    namespace fs = std::filesystem;
    fs::remove_all(work);
    const RunConfig cfg = parse_run_config(determinism_config());
    std::vector<std::string> diffs;
    run_synth(cfg, work / "corpus_a");
    run_synth(cfg, work / "corpus_b");
    const CorpusManifest ma = load_manifest(manifest_path(work / "corpus_a"));
    const CorpusManifest mb = load_manifest(manifest_path(work / "corpus_b"));
    for (std::size_t i = 0; i < ma.utterances.size(); ++i)
      if (file_bytes(ma.resolve(ma.utterances[i].feats)) != file_bytes(mb.resolve(mb.utterances[i].feats)))
        diffs.push_back("features of " + ma.utterances[i].id);

    auto run = [&](const std::string& name, const std::optional<fs::path>& resume) {
      const auto ckpt = run_train(cfg, work / "corpus_a", work / name, resume);
      save_embeddings(work / name / "emb", run_extract(ckpt, manifest_path(work / "corpus_a")));
      write_scores(work / name / "scores.txt", run_score(work / name / "emb", ma.resolve(ma.trials)));
      write_json(work / name / "metrics.json", run_eval(work / name / "scores.txt", ma.resolve(ma.trials), cfg.dcf));
    };
    run("a", std::nullopt);
    run("b", std::nullopt);
    run("resumed", work / "a" / checkpoint_name(10));
    for (const std::string other : {"b", "resumed"})
      for (const std::string f : {"final/tensors.bin", "final/state.json", "emb/vectors.cpt", "scores.txt", "metrics.json"})
        if (file_bytes(work / "a" / f) != file_bytes(work / other / f)) diffs.push_back(other + "/" + f);
    r.passed = diffs.empty();
    r.detail = diffs.empty() ? "corpus, checkpoints, embeddings, scores and metrics bit-identical; resume from step 10 "
                               "reproduces step 30"
                             : "differs:";
    for (const auto& d : diffs) r.detail += " " + d;
  });
}

// ---------------------------------------------------------------------------

struct SuiteOptions {
  bool end_to_end = false;
  bool negative_control = true;
  std::filesystem::path work_dir = std::filesystem::temp_directory_path() / "corrpool-acceptance";
  std::size_t jobs = 1;
  std::ostream* progress = nullptr;  // per-check lines as they finish, and e2e training logs
};

inline void print_result(std::ostream& os, const CheckResult& r) {
  os << (r.passed ? "PASS" : "FAIL") << "  [" << std::setw(3) << r.id << "] " << r.name << " (" << std::fixed
     << std::setprecision(1) << r.seconds << " s): " << std::defaultfloat << r.detail << std::endl;
}

inline std::vector<CheckResult> run_suite(const SuiteOptions& opt) {
  std::vector<CheckResult> out;
  auto add = [&](CheckResult r) {
    if (opt.progress) print_result(*opt.progress, r);
    out.push_back(std::move(r));
  };
  add(check_gradients());
  add(check_correlation_invariants());
  if (opt.negative_control) add(check_negative_control());
  add(check_dimensions());
  add(check_gram_recovery());
  add(check_full_shapes());
  add(check_metric_oracles());
  add(check_aam_and_accumulation());
  if (opt.end_to_end) add(check_end_to_end(opt.work_dir / "e2e", opt.jobs, opt.progress));
  add(check_determinism(opt.work_dir / "determinism"));
  return out;
}

inline bool all_passed(const std::vector<CheckResult>& rs) {
  return std::all_of(rs.begin(), rs.end(), [](const CheckResult& r) { return r.passed; });
}

}  // namespace corrpool::verify
