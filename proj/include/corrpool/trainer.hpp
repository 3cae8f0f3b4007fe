// corrpool/trainer.hpp


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


// Momentum SGD with microbatch gradient accumulation, plateau learning-rate
// halving and the AAM margin curriculum.

#pragma once

#include <functional>
#include <limits>
#include <ostream>

#include "corrpool/model.hpp"
#include "corrpool/serialize.hpp"
#include "corrpool/synth.hpp"

namespace corrpool {

struct TrainConfig {
  double lr_init = 0.2;
  double momentum = 0.9;
  std::size_t minibatch = 256;
  std::size_t microbatch = 16;
  std::size_t plateau_updates = 3000;
  double lr_factor = 0.5;
  /// Held-out loss must drop by more than this to count as an improvement.
  double improvement_tol = 1e-5;
  std::size_t eval_cadence = 500;
  std::size_t total_steps = 2000;
  /// Steps between checkpoints; 0 means at every held-out evaluation.
  std::size_t checkpoint_every = 0;
  std::size_t crop_frames = 200;
  std::string precision = "f32";
  std::uint64_t seed = 0;

  void validate() const {
    if (!(lr_init >= 0.0)) throw ConfigError("train.lr_init must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("train.momentum must be in [0, 1)");
    if (minibatch == 0 || microbatch == 0) throw ConfigError("train: batch sizes must be positive");
    if (minibatch % microbatch != 0)
      throw ConfigError("train.minibatch (" + std::to_string(minibatch) + ") must be a multiple of train.microbatch (" +
                        std::to_string(microbatch) + ")");
    if (microbatch < 2) throw ConfigError("train.microbatch must be at least 2 for batch-norm statistics");
    if (!(lr_factor > 0.0 && lr_factor < 1.0)) throw ConfigError("train.lr_factor must be in (0, 1)");
    if (eval_cadence == 0) throw ConfigError("train.eval_cadence must be positive");
    if (plateau_updates < eval_cadence) throw ConfigError("train.plateau_updates must be >= train.eval_cadence");
    if (total_steps == 0) throw ConfigError("train.total_steps must be positive");
    if (crop_frames == 0) throw ConfigError("train.crop_frames must be positive");
    if (precision != "f32" && precision != "f64") throw ConfigError("train.precision must be f32 or f64");
    if (!(improvement_tol >= 0.0)) throw ConfigError("train.improvement_tol must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Learning-rate schedule.

struct LrState {
  double lr = 0.2;
  double best_loss = std::numeric_limits<double>::infinity();
  /// Step of the last improvement or the last halving.
  std::size_t window_start = 0;
  std::size_t halvings = 0;
};

/// Records a held-out loss measured after `step` updates and returns the
/// learning rate to use from here on.
inline double lr_schedule_update(LrState& s, std::size_t step, double heldout_loss, const TrainConfig& cfg) {
  if (heldout_loss < s.best_loss - cfg.improvement_tol) {
    s.best_loss = heldout_loss;
    s.window_start = step;
  } else if (step - s.window_start >= cfg.plateau_updates) {
    s.lr *= cfg.lr_factor;
    s.window_start = step;
    ++s.halvings;
  }
  return s.lr;
}

// ---------------------------------------------------------------------------
// Data.

template <Real T>
struct Dataset {
  std::vector<std::string> ids;
  std::vector<Tensor<T>> feats;  // [T_i, F]
  std::vector<std::size_t> labels;
};

template <Real T>
struct TrainData {
  std::vector<std::string> speakers;  // class label -> speaker id
  Dataset<T> train;
  Dataset<T> heldout;
};

/// Training and held-out features of the training speakers.
template <Real T>
TrainData<T> load_train_data(const CorpusManifest& m) {
  TrainData<T> d;
  d.speakers = m.training_speakers();
  std::map<std::string, std::size_t> label;
  for (std::size_t i = 0; i < d.speakers.size(); ++i) label[d.speakers[i]] = i;
  std::vector<std::size_t> per_class(d.speakers.size(), 0);
  for (const auto& u : m.utterances) {
    if (u.split != "train" && u.split != "heldout") continue;
    auto it = label.find(u.speaker);
    if (it == label.end()) throw ConfigError("utterance " + u.id + " belongs to unknown training speaker " + u.speaker);
    Dataset<T>& ds = u.split == "train" ? d.train : d.heldout;
    ds.ids.push_back(u.id);
    ds.feats.push_back(load_tensor<T>(m.resolve(u.feats)));
    ds.labels.push_back(it->second);
    if (u.split == "train") ++per_class[it->second];
  }
  if (d.train.ids.empty()) throw ConfigError("corpus has no training utterances");
  for (std::size_t i = 0; i < per_class.size(); ++i)
    if (per_class[i] == 0) throw ConfigError("training speaker " + d.speakers[i] + " has no training utterances");
  return d;
}

template <Real T>
struct Batch {
  Tensor<T> feats;  // [B, crop, F]
  std::vector<std::size_t> labels;
};

/// Copies `crop` frames of `src` starting at `offset`, wrapping around when
/// the utterance is shorter than the crop.
template <Real T>
void copy_crop(const Tensor<T>& src, std::size_t offset, std::size_t crop, T* dst) {
  const std::size_t t = src.dim(0), f = src.dim(1);
  for (std::size_t r = 0; r < crop; ++r) std::copy_n(src.data() + ((offset + r) % t) * f, f, dst + r * f);
}

// ---------------------------------------------------------------------------
// Optimization.

template <Real T>
struct OptState {
  std::vector<Tensor<T>> velocity;  // parallel to the learnable tensors of visit_model
};

template <Real T>
std::vector<Tensor<T>*> learnable_tensors(Model<T>& m) {
  std::vector<Tensor<T>*> out;
  visit_model(m, [&](const std::string&, Tensor<T>& t, bool learnable) {
    if (learnable) out.push_back(&t);
  });
  return out;
}

template <Real T>
OptState<T> init_opt_state(Model<T>& m) {
  OptState<T> s;
  for (Tensor<T>* t : learnable_tensors(m)) s.velocity.emplace_back(t->shape());
  return s;
}

struct StepOptions {
  /// kEval freezes batch-norm statistics, making microbatch accumulation
  /// exactly equivalent to a single full-batch gradient.
  ops::BnMode bn_mode = ops::BnMode::kTrain;
};

template <Real T>
struct Gradients {
  double loss = 0.0;             // mean over the minibatch
  std::vector<Tensor<T>> grads;  // parallel to learnable_tensors
};

/// Gradient of the minibatch-mean AAM loss, accumulated over microbatches:
/// each microbatch gradient is weighted by its share of the minibatch.
template <Real T>
Gradients<T> accumulate_gradients(Model<T>& m, const Batch<T>& batch, std::size_t microbatch, double margin,
                                  double scale, std::mt19937_64& rng, StepOptions opts = {}) {
  require_rank(batch.feats.shape(), 3, "training batch");
  const std::size_t n = batch.feats.dim(0), t = batch.feats.dim(1), f = batch.feats.dim(2);
  if (batch.labels.size() != n) throw ShapeError("training batch: label count mismatch");
  auto params = learnable_tensors(m);
  Gradients<T> out;
  for (Tensor<T>* p : params) out.grads.emplace_back(p->shape());
  for (std::size_t b0 = 0; b0 < n; b0 += microbatch) {
    const std::size_t nb = std::min(microbatch, n - b0);
    Tensor<T> x(Shape{nb, t, f});
    std::copy_n(batch.feats.data() + b0 * t * f, nb * t * f, x.data());
    const std::span<const std::size_t> labels(batch.labels.data() + b0, nb);
    Tape<T> tape;
    ParamBinder<T> bind(tape, true);
    Var<T> emb = model_embed(tape.constant(std::move(x)), m, opts.bn_mode, rng, bind);
    auto aam = aam_loss(emb, labels, bind(m.head), static_cast<T>(margin), static_cast<T>(scale));
    const double loss = static_cast<double>(aam.loss.value()[0]);
    if (!std::isfinite(loss)) {
      const auto bad = tape.first_non_finite();
      throw NumericError("non-finite training loss; first non-finite tensor is '" +
                         (bad ? tape.name(*bad) : std::string("?")) + "' (tape node " +
                         (bad ? std::to_string(*bad) : std::string("?")) + ")");
    }
    tape.backward(aam.loss);
    const T w = static_cast<T>(nb) / static_cast<T>(n);
    out.loss += loss * static_cast<double>(nb) / static_cast<double>(n);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Tensor<T>* g = bind.grad(*params[i]);
      if (!g) continue;
      for (std::size_t k = 0; k < g->size(); ++k) out.grads[i][k] += w * (*g)[k];
    }
  }
  return out;
}

/// v <- mu v + g; p <- p - lr v for every learnable tensor.
template <Real T>
void sgd_momentum_update(Model<T>& m, OptState<T>& opt, const std::vector<Tensor<T>>& grads, double lr,
                         double momentum) {
  auto params = learnable_tensors(m);
  if (opt.velocity.size() != params.size() || grads.size() != params.size())
    throw ShapeError("optimizer state does not match the model");
  const T mu = static_cast<T>(momentum), eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    Tensor<T>& v = opt.velocity[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mu * v[k] + grads[i][k];
      p[k] -= eta * v[k];
    }
  }
}

/// One update on a minibatch; returns the minibatch-mean loss.
template <Real T>
double train_step(Model<T>& m, const Batch<T>& batch, OptState<T>& opt, const TrainConfig& cfg, double lr,
                  double margin, double scale, std::mt19937_64& rng, StepOptions opts = {}) {
  auto g = accumulate_gradients(m, batch, cfg.microbatch, margin, scale, rng, opts);
  sgd_momentum_update(m, opt, g.grads, lr, cfg.momentum);
  return g.loss;
}

/// Eval-mode mean AAM loss over whole utterances.
template <Real T>
double heldout_loss(const Model<T>& m, const Dataset<T>& data, double margin, double scale) {
  if (data.feats.empty()) return std::numeric_limits<double>::quiet_NaN();
  double total = 0.0;
  for (std::size_t i = 0; i < data.feats.size(); ++i) {
    Tape<T> tape;
    ParamBinder<T> bind(tape, false);
    Var<T> e = tape.constant(embed_utterance(m, data.feats[i]).reshaped(Shape{1, m.pooling.embed_dim}));
    const std::size_t label = data.labels[i];
    auto aam = aam_loss(e, std::span<const std::size_t>(&label, 1), bind(m.head), static_cast<T>(margin),
                        static_cast<T>(scale));
    total += static_cast<double>(aam.loss.value()[0]);
  }
  return total / static_cast<double>(data.feats.size());
}

// ---------------------------------------------------------------------------
// Training loop.

struct LogEntry {
  std::size_t step = 0;
  double lr = 0.0;
  double margin = 0.0;
  double train_loss = 0.0;
  double heldout_loss = 0.0;
};

inline std::string format_log_entry(const LogEntry& e) {
  std::ostringstream os;
  os.precision(6);
  os << "step " << e.step << " lr " << e.lr << " margin " << e.margin << " train_loss " << e.train_loss
     << " heldout_loss " << e.heldout_loss;
  return os.str();
}

/// Everything needed to continue training bit-for-bit.
template <Real T>
struct TrainState {
  Model<T> model;
  OptState<T> opt;
  LrState lr;
  std::size_t step = 0;
  std::size_t margin_index = 0;
  std::mt19937_64 rng;
  std::vector<std::size_t> order;  // current epoch permutation of training utterances
  std::size_t cursor = 0;
  double train_loss_sum = 0.0;
  std::size_t train_loss_count = 0;
  std::vector<LogEntry> log;
};

template <Real T>
TrainState<T> init_train_state(const ResNetConfig& resnet, const PoolingConfig& pooling, std::size_t n_speakers,
                               const TrainConfig& cfg) {
  TrainState<T> s{init_model<T>(resnet, pooling, n_speakers, cfg.seed), {}, {}, 0, 0, std::mt19937_64(derive_seed(cfg.seed, 7)),
                  {}, 0, 0.0, 0, {}};
  s.opt = init_opt_state(s.model);
  s.lr.lr = cfg.lr_init;
  return s;
}

/// Draws the next minibatch: utterances in epoch order (reshuffled whenever
/// exhausted), each cropped at a uniformly random offset.
template <Real T>
Batch<T> next_batch(TrainState<T>& s, const Dataset<T>& data, std::size_t size, std::size_t crop) {
  const std::size_t f = data.feats.front().dim(1);
  Batch<T> b{Tensor<T>(Shape{size, crop, f}), {}};
  for (std::size_t i = 0; i < size; ++i) {
    if (s.cursor >= s.order.size()) {
      s.order.resize(data.feats.size());
      std::iota(s.order.begin(), s.order.end(), std::size_t{0});
      std::shuffle(s.order.begin(), s.order.end(), s.rng);
      s.cursor = 0;
    }
    const std::size_t u = s.order[s.cursor++];
    const std::size_t t = data.feats[u].dim(0);
    const std::size_t offset =
        t > crop ? std::uniform_int_distribution<std::size_t>(0, t - crop)(s.rng) : std::size_t{0};
    copy_crop(data.feats[u], offset, crop, b.feats.data() + i * crop * f);
    b.labels.push_back(data.labels[u]);
  }
  return b;
}

/// Runs updates from s.step up to cfg.total_steps. After every eval_cadence
/// updates the held-out loss is measured, the learning rate schedule is
/// advanced and a log line is written. `on_checkpoint` is called at the
/// checkpoint cadence and after the final step.
template <Real T>
void train_loop(TrainState<T>& s, const TrainData<T>& data, const TrainConfig& cfg, const AamConfig& aam,
                std::ostream* log, const std::function<void(const TrainState<T>&)>& on_checkpoint = {}) {
  cfg.validate();
  aam.validate();
  if (data.train.feats.empty()) throw ConfigError("empty training corpus");
  if (data.speakers.size() != s.model.head.dim(1))
    throw ConfigError("model has " + std::to_string(s.model.head.dim(1)) + " output classes but the corpus has " +
                      std::to_string(data.speakers.size()) + " training speakers");
  const std::size_t ckpt_every = cfg.checkpoint_every ? cfg.checkpoint_every : cfg.eval_cadence;
  while (s.step < cfg.total_steps) {
    s.margin_index = margin_index_at_step(s.step, cfg.total_steps, aam);
    const double margin = aam.margin_schedule[s.margin_index];
    Batch<T> batch = next_batch(s, data.train, cfg.minibatch, cfg.crop_frames);
    const double loss = train_step(s.model, batch, s.opt, cfg, s.lr.lr, margin, aam.scale, s.rng);
    ++s.step;
    s.train_loss_sum += loss;
    ++s.train_loss_count;
    if (s.step % cfg.eval_cadence == 0 || s.step == cfg.total_steps) {
      LogEntry e{s.step, s.lr.lr, margin, s.train_loss_sum / static_cast<double>(s.train_loss_count),
                 heldout_loss(s.model, data.heldout, margin, aam.scale)};
      if (s.step % cfg.eval_cadence == 0 && std::isfinite(e.heldout_loss))
        lr_schedule_update(s.lr, s.step, e.heldout_loss, cfg);
      s.log.push_back(e);
      s.train_loss_sum = 0.0;
      s.train_loss_count = 0;
      if (log) *log << format_log_entry(e) << std::endl;
    }
    if (on_checkpoint && (s.step % ckpt_every == 0 || s.step == cfg.total_steps)) on_checkpoint(s);
  }
}

}  // namespace corrpool
