// corrpool/backbone.hpp

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

// 2D residual network over log-mel features, treated as a one-channel image
// [N, T_i, F_i, 1]. Post-activation (v1) basic blocks:
//
//   conv3x3(stride) -> BN -> ReLU -> conv3x3 -> BN -> (+ shortcut) -> ReLU
//
// The shortcut is the identity unless the block changes stride or width, in
// which case it is a strided 1x1 conv followed by BN. There is no max-pool
// after the stem, so both axes shrink only by the stage strides.

#pragma once

#include <optional>
#include <random>

#include "corrpool/ops.hpp"
#include "corrpool/params.hpp"

namespace corrpool {

struct ResNetConfig {
  std::size_t stem_channels = 64;
  std::vector<std::size_t> stage_blocks{3, 4, 6, 3};
  std::vector<std::size_t> stage_channels{64, 128, 256, 256};
  std::vector<std::size_t> stage_strides{1, 2, 2, 2};
  std::size_t input_dim = 80;

  /// ResNet-34 layout with the 64/128/256/256 widths.
  static ResNetConfig full() { return {}; }

  /// One block per stage and 8/16/32/32 channels; same strides.
  static ResNetConfig desk() {
    ResNetConfig c;
    c.stem_channels = 8;
    c.stage_blocks = {1, 1, 1, 1};
    c.stage_channels = {8, 16, 32, 32};
    return c;
  }

  std::size_t total_stride() const {
    std::size_t s = 1;
    for (std::size_t v : stage_strides) s *= v;
    return s;
  }
  std::size_t output_channels() const { return stage_channels.back(); }
  std::size_t output_freq() const { return ceil_div(input_dim, total_stride()); }
  std::size_t output_time(std::size_t t_in) const { return ceil_div(t_in, total_stride()); }
  std::size_t min_frames() const { return total_stride(); }

  void validate() const {
    if (stage_blocks.size() != 4 || stage_channels.size() != 4 || stage_strides.size() != 4)
      throw ConfigError("resnet: exactly four stages are required");
    for (std::size_t s : stage_strides)
      if (s != 1 && s != 2) throw ConfigError("resnet: stage strides must be 1 or 2");
    for (std::size_t b : stage_blocks)
      if (b == 0) throw ConfigError("resnet: every stage needs at least one block");
    for (std::size_t c : stage_channels)
      if (c == 0) throw ConfigError("resnet: channel counts must be positive");
    if (stem_channels == 0 || input_dim == 0) throw ConfigError("resnet: zero-sized stem or input");
  }
};

template <Real T>
struct ConvBn {
  Tensor<T> kernel;  // [kh, kw, Cin, Cout]
  Tensor<T> gamma;
  Tensor<T> beta;
  ops::BatchNormStats<T> stats;
  std::size_t stride = 1;
};

template <Real T>
struct ResBlock {
  ConvBn<T> conv1;
  ConvBn<T> conv2;
  std::optional<ConvBn<T>> shortcut;
};

template <Real T>
struct BackboneParams {
  ConvBn<T> stem;
  std::vector<std::vector<ResBlock<T>>> stages;
};

namespace detail {

template <Real T>
ConvBn<T> make_conv_bn(std::size_t k, std::size_t cin, std::size_t cout, std::size_t stride,
                       std::mt19937_64& rng) {
  ConvBn<T> cb;
  cb.kernel = Tensor<T>(Shape{k, k, cin, cout});
  const double bound = std::sqrt(6.0 / static_cast<double>(k * k * cin));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : cb.kernel.values()) v = static_cast<T>(u(rng));
  cb.gamma = Tensor<T>(Shape{cout}, T(1));
  cb.beta = Tensor<T>(Shape{cout}, T(0));
  cb.stride = stride;
  return cb;
}

}  // namespace detail

/// He-uniform conv kernels, gamma = 1, beta = 0. Running statistics start
/// unset. Deterministic for a given seed.
template <Real T>
BackboneParams<T> init_backbone(const ResNetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  BackboneParams<T> p;
  p.stem = detail::make_conv_bn<T>(3, 1, cfg.stem_channels, 1, rng);
  std::size_t cin = cfg.stem_channels;
  for (std::size_t s = 0; s < 4; ++s) {
    std::vector<ResBlock<T>> blocks;
    for (std::size_t b = 0; b < cfg.stage_blocks[s]; ++b) {
      const std::size_t stride = b == 0 ? cfg.stage_strides[s] : 1;
      const std::size_t cout = cfg.stage_channels[s];
      ResBlock<T> blk;
      blk.conv1 = detail::make_conv_bn<T>(3, cin, cout, stride, rng);
      blk.conv2 = detail::make_conv_bn<T>(3, cout, cout, 1, rng);
      if (stride != 1 || cin != cout) blk.shortcut = detail::make_conv_bn<T>(1, cin, cout, stride, rng);
      blocks.push_back(std::move(blk));
      cin = cout;
    }
    p.stages.push_back(std::move(blocks));
  }
  return p;
}

/// Calls f(name, tensor, learnable) for every tensor in the backbone,
/// including batch-norm running statistics (learnable = false). Works for
/// const and non-const parameter sets.
template <typename P, typename F>
void visit_backbone(P& p, F&& f) {
  auto conv_bn = [&](const std::string& prefix, auto& cb) {
    f(prefix + ".kernel", cb.kernel, true);
    f(prefix + ".gamma", cb.gamma, true);
    f(prefix + ".beta", cb.beta, true);
    f(prefix + ".bn_mean", cb.stats.mean, false);
    f(prefix + ".bn_var", cb.stats.var, false);
  };
  conv_bn("backbone.stem", p.stem);
  for (std::size_t s = 0; s < p.stages.size(); ++s)
    for (std::size_t b = 0; b < p.stages[s].size(); ++b) {
      auto& blk = p.stages[s][b];
      const std::string pre = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b + 1);
      conv_bn(pre + ".conv1", blk.conv1);
      conv_bn(pre + ".conv2", blk.conv2);
      if (blk.shortcut) conv_bn(pre + ".shortcut", *blk.shortcut);
    }
}

template <Real T>
std::size_t count_learnable(const BackboneParams<T>& p) {
  std::size_t n = 0;
  visit_backbone(p, [&](const std::string&, const Tensor<T>& t, bool learnable) {
    if (learnable) n += t.size();
  });
  return n;
}

namespace detail {

template <Real T, typename Params>
Var<T> backbone_forward(const Var<T>& x, Params& params, const ResNetConfig& cfg, ops::BnMode mode,
                        ParamBinder<T>& bind) {
  require_rank(x.shape(), 4, "backbone input");
  if (x.shape()[3] != 1) throw ShapeError("backbone input must have one channel, got " + shape_str(x.shape()));
  if (x.shape()[2] != cfg.input_dim)
    throw ShapeError("backbone input has " + std::to_string(x.shape()[2]) + " feature bins, config expects " +
                     std::to_string(cfg.input_dim));
  if (x.shape()[1] < cfg.min_frames())
    throw ShapeError("input of " + std::to_string(x.shape()[1]) + " frames is too short; the backbone needs at least " +
                     std::to_string(cfg.min_frames()) + " frames");
  constexpr bool kMutable = !std::is_const_v<Params>;
  auto apply = [&](const Var<T>& in, auto& cb) {
    Var<T> h = ops::conv2d(in, bind(cb.kernel), ops::Stride2{cb.stride, cb.stride});
    ops::BatchNormStats<T>* update = nullptr;
    if constexpr (kMutable) update = mode == ops::BnMode::kTrain ? &cb.stats : nullptr;
    return ops::batch_norm(h, bind(cb.gamma), bind(cb.beta), cb.stats, mode, update);
  };
  Var<T> h = ops::relu(apply(x, params.stem));
  for (auto& stage : params.stages)
    for (auto& blk : stage) {
      Var<T> a = ops::relu(apply(h, blk.conv1));
      a = apply(a, blk.conv2);
      Var<T> skip = blk.shortcut ? apply(h, *blk.shortcut) : h;
      h = ops::relu(ops::add(a, skip));
    }
  return h;
}

}  // namespace detail

/// Training-capable forward: in train mode batch statistics are used and the
/// running statistics in `params` are updated. Output [N, T, F, C].
template <Real T>
Var<T> backbone_forward(const Var<T>& x, BackboneParams<T>& params, const ResNetConfig& cfg,
                        ops::BnMode mode, ParamBinder<T>& bind) {
  return detail::backbone_forward<T>(x, params, cfg, mode, bind);
}

/// Eval-mode forward over frozen parameters; safe to call concurrently.
template <Real T>
Var<T> backbone_forward(const Var<T>& x, const BackboneParams<T>& params, const ResNetConfig& cfg,
                        ParamBinder<T>& bind) {
  return detail::backbone_forward<T>(x, params, cfg, ops::BnMode::kEval, bind);
}

}  // namespace corrpool
