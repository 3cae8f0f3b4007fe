// corrpool/model.hpp


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


// Backbone + pooling + AAM head as one parameter set.

#pragma once

#include "corrpool/backbone.hpp"
#include "corrpool/loss.hpp"
#include "corrpool/pooling.hpp"

namespace corrpool {

template <Real T>
struct Model {
  ResNetConfig resnet;
  PoolingConfig pooling;
  BackboneParams<T> backbone;
  PoolParams<T> pool;
  Tensor<T> head;  // [d_e, n_speakers]
};

template <Real T>
Model<T> init_model(const ResNetConfig& resnet, const PoolingConfig& pooling, std::size_t n_speakers,
                    std::uint64_t seed) {
  resnet.validate();
  if (n_speakers < 2) throw ConfigError("training needs at least 2 speakers, got " + std::to_string(n_speakers));
  Model<T> m{resnet, pooling, init_backbone<T>(resnet, seed), {}, {}};
  std::mt19937_64 rng(seed ^ 0x5bd1e995ULL);
  m.pool = init_pool_params<T>(pooling, resnet.output_freq(), resnet.output_channels(), rng);
  m.head = init_head<T>(pooling.embed_dim, n_speakers, rng);
  return m;
}

/// Calls f(name, tensor, learnable) for every tensor of the model in a fixed
/// order. Batch-norm running statistics are visited with learnable = false.
template <typename M, typename F>
void visit_model(M& m, F&& f) {
  visit_backbone(m.backbone, f);
  if (m.pooling.uses_correlation()) f(std::string("pool.reduction"), m.pool.reduction, true);
  f(std::string("pool.embed_weight"), m.pool.embed_weight, true);
  f(std::string("pool.embed_bias"), m.pool.embed_bias, true);
  f(std::string("head"), m.head, true);
}

namespace detail {

template <Real T, typename M>
Var<T> embed_impl(const Var<T>& feats, M& m, ops::BnMode mode, bool training, std::mt19937_64& rng,
                  ParamBinder<T>& bind) {
  require_rank(feats.shape(), 3, "model input");
  const auto& s = feats.shape();
  Var<T> x = ops::reshape(feats, Shape{s[0], s[1], s[2], 1});
  Var<T> y;
  if constexpr (std::is_const_v<M>) y = backbone_forward(x, m.backbone, m.resnet, bind);
  else y = backbone_forward(x, m.backbone, m.resnet, mode, bind);
  std::optional<Var<T>> red;
  if (m.pooling.uses_correlation()) red = bind(m.pool.reduction);
  return extract_embedding(y, m.pooling, red ? &*red : nullptr, bind(m.pool.embed_weight), bind(m.pool.embed_bias),
                           training, rng);
}

}  // namespace detail

/// Embeddings [N, d_e] for a batch of feature matrices [N, T_i, F_i]. In
/// train mode the batch-norm running statistics of `m` are updated and
/// channel dropout is active.
template <Real T>
Var<T> model_embed(const Var<T>& feats, Model<T>& m, ops::BnMode mode, std::mt19937_64& rng, ParamBinder<T>& bind) {
  return detail::embed_impl<T>(feats, m, mode, mode == ops::BnMode::kTrain, rng, bind);
}

/// Eval-mode embedding of one utterance [T_i, F_i] -> [d_e]. Safe to call
/// concurrently on a shared model.
template <Real T>
Tensor<T> embed_utterance(const Model<T>& m, const Tensor<T>& frames) {
  require_rank(frames.shape(), 2, "embed_utterance");
  Tape<T> tape;
  ParamBinder<T> bind(tape, false);
  std::mt19937_64 unused(0);
  Var<T> x = tape.constant(frames.reshaped(Shape{1, frames.dim(0), frames.dim(1)}));
  Var<T> e = detail::embed_impl<T>(x, m, ops::BnMode::kEval, false, unused, bind);
  return e.value().reshaped(Shape{m.pooling.embed_dim});
}

}  // namespace corrpool
