// corrpool/grad_check.hpp

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

#pragma once

#include "corrpool/tape.hpp"

namespace corrpool {

struct GradCheckOptions {
  double h = 1e-5;
  /// Inputs whose gradients are compared; empty means all.
  std::vector<bool> wrt;
  /// Upper bound on coordinates probed per input (evenly strided); 0 = all.
  std::size_t max_coords = 0;
  /// Coordinates for which this returns true are not probed (e.g. values
  /// within 10h of a ReLU kink).
  std::function<bool(std::size_t input, std::size_t index, double value)> skip;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;
};

/// Compares reverse-mode gradients of a scalar computation against central
/// differences. `f` builds the computation on a fresh tape from leaf
/// variables holding `inputs`; it is re-run twice per probed coordinate.
/// The error of a coordinate is |a - n| / max(|a|, |n|, 1e-8).
template <typename F>
GradCheckResult grad_check(F&& f, const std::vector<Tensor<double>>& inputs,
                           const GradCheckOptions& opts = {}) {
  auto evaluate = [&](const std::vector<Tensor<double>>& xs, std::vector<Tensor<double>>* grads) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : xs) vars.push_back(tape.param(x));
    Var<double> out = f(tape, vars);
    if (out.value().size() != 1)
      throw ShapeError("grad_check: computation must return a scalar, got " + shape_str(out.shape()));
    const double v = out.value()[0];
    if (grads) {
      tape.backward(out);
      grads->clear();
      for (const auto& var : vars) grads->push_back(var.grad());
    }
    return v;
  };

  std::vector<Tensor<double>> analytic;
  evaluate(inputs, &analytic);

  GradCheckResult res;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    if (!opts.wrt.empty() && (k >= opts.wrt.size() || !opts.wrt[k])) continue;
    const std::size_t n = inputs[k].size();
    const std::size_t step = (opts.max_coords && n > opts.max_coords) ? n / opts.max_coords : 1;
    for (std::size_t i = 0; i < n; i += step) {
      const double x0 = inputs[k][i];
      if (opts.skip && opts.skip(k, i, x0)) {
        ++res.skipped;
        continue;
      }
      probe[k][i] = x0 + opts.h;
      const double fp = evaluate(probe, nullptr);
      probe[k][i] = x0 - opts.h;
      const double fm = evaluate(probe, nullptr);
      probe[k][i] = x0;
      const double num = (fp - fm) / (2.0 * opts.h);
      const double ana = analytic[k][i];
      const double err = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      ++res.checked;
      if (err >= res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_input = k;
        res.worst_index = i;
        res.analytic = ana;
        res.numeric = num;
      }
    }
  }
  return res;
}

}  // namespace corrpool
