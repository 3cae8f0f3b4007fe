// tests/trainer_test.cpp

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

#include <gtest/gtest.h>

#include "corrpool/checkpoint.hpp"
#include "corrpool/trainer.hpp"
#include "corrpool/verify/oracles.hpp"
#include "test_util.hpp"

namespace corrpool {
namespace {

constexpr std::size_t kFeat = 16;

ResNetConfig tiny_resnet() {
  auto c = ResNetConfig::desk();
  c.input_dim = kFeat;
  return c;
}

PoolingConfig tiny_pooling(PoolingMode mode = PoolingMode::kCorrelation) {
  PoolingConfig p;
  p.mode = mode;
  p.c_reduced = 4;
  p.f_merge = 2;
  p.embed_dim = 16;
  return p;
}

TrainConfig tiny_train() {
  TrainConfig c;
  c.lr_init = 0.05;
  c.minibatch = 8;
  c.microbatch = 4;
  c.crop_frames = 24;
  c.eval_cadence = 2;
  c.plateau_updates = 4;
  c.total_steps = 6;
  c.seed = 3;
  return c;
}

/// Speakers are distinguished by a per-class mean log-mel profile.
template <Real T>
TrainData<T> toy_data(std::size_t n_spk, std::size_t per_spk, std::size_t heldout, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  TrainData<T> d;
  for (std::size_t s = 0; s < n_spk; ++s) {
    d.speakers.push_back("spk" + std::to_string(s));
    std::vector<double> mean(kFeat);
    for (auto& v : mean) v = 1.5 * nd(rng);
    for (std::size_t u = 0; u < per_spk + heldout; ++u) {
      const std::size_t t = 20 + rng() % 20;
      Tensor<T> f(Shape{t, kFeat});
      for (std::size_t r = 0; r < t; ++r)
        for (std::size_t k = 0; k < kFeat; ++k) f.at(r, k) = static_cast<T>(mean[k] + nd(rng));
      Dataset<T>& ds = u < per_spk ? d.train : d.heldout;
      ds.ids.push_back(d.speakers.back() + "-" + std::to_string(u));
      ds.feats.push_back(std::move(f));
      ds.labels.push_back(s);
    }
  }
  return d;
}

template <Real T>
std::vector<Tensor<T>> snapshot(Model<T>& m) {
  std::vector<Tensor<T>> out;
  for (Tensor<T>* t : learnable_tensors(m)) out.push_back(*t);
  return out;
}

template <Real T>
void expect_same_state(TrainState<T>& a, TrainState<T>& b) {
  std::vector<Tensor<T>> ta, tb;
  detail::visit_state_tensors(a, [&](const std::string&, const Tensor<T>& t) { ta.push_back(t); });
  detail::visit_state_tensors(b, [&](const std::string&, const Tensor<T>& t) { tb.push_back(t); });
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i], tb[i]) << "tensor " << i;
  EXPECT_EQ(a.step, b.step);
  EXPECT_EQ(a.lr.lr, b.lr.lr);
  EXPECT_EQ(a.lr.window_start, b.lr.window_start);
  EXPECT_TRUE(a.rng == b.rng);
  EXPECT_EQ(a.order, b.order);
  EXPECT_EQ(a.cursor, b.cursor);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].heldout_loss, b.log[i].heldout_loss);
  }
}

// ---------------------------------------------------------------------------
// Optimizer.

TEST(Sgd, ZeroLearningRateLeavesParameters) {
  const auto data = toy_data<double>(3, 4, 1, 1);
  auto s = init_train_state<double>(tiny_resnet(), tiny_pooling(), 3, tiny_train());
  const auto before = snapshot(s.model);
  const auto batch = next_batch(s, data.train, 8, 24);
  train_step(s.model, batch, s.opt, tiny_train(), 0.0, 0.2, 30.0, s.rng);
  const auto after = snapshot(s.model);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(after[i], before[i]);
}

TEST(Sgd, ZeroMomentumIsPlainGradientStep) {
  const auto data = toy_data<double>(3, 4, 1, 2);
  auto s = init_train_state<double>(tiny_resnet(), tiny_pooling(), 3, tiny_train());
  const auto batch = next_batch(s, data.train, 8, 24);
  Model<double> copy = s.model;
  std::mt19937_64 r1 = s.rng, r2 = s.rng;
  const auto g = accumulate_gradients(copy, batch, 4, 0.2, 30.0, r1);
  const auto before = snapshot(s.model);
  auto cfg = tiny_train();
  cfg.momentum = 0.0;
  train_step(s.model, batch, s.opt, cfg, 0.1, 0.2, 30.0, r2);
  const auto after = snapshot(s.model);
  for (std::size_t i = 0; i < before.size(); ++i)
    for (std::size_t k = 0; k < before[i].size(); ++k) EXPECT_EQ(after[i][k], before[i][k] - 0.1 * g.grads[i][k]);
}

TEST(Sgd, MomentumRecurrence) {
  auto m = init_model<double>(tiny_resnet(), tiny_pooling(), 3, 4);
  auto opt = init_opt_state(m);
  const auto p0 = snapshot(m);
  std::mt19937_64 rng(5);
  std::vector<Tensor<double>> g1, g2;
  for (const auto& p : p0) {
    g1.push_back(oracle::random_tensor(p.shape(), rng));
    g2.push_back(oracle::random_tensor(p.shape(), rng));
  }
  sgd_momentum_update(m, opt, g1, 0.1, 0.9);
  sgd_momentum_update(m, opt, g2, 0.05, 0.9);
  const auto p2 = snapshot(m);
  for (std::size_t i = 0; i < p0.size(); ++i)
    for (std::size_t k = 0; k < p0[i].size(); ++k) {
      const double v1 = g1[i][k], v2 = 0.9 * v1 + g2[i][k];
      EXPECT_NEAR(p2[i][k], p0[i][k] - 0.1 * v1 - 0.05 * v2, 1e-15);
    }
}

// Frozen batch-norm statistics make the per-microbatch split irrelevant.
TEST(Sgd, MicrobatchAccumulationMatchesFullBatch) {
  const auto data = toy_data<double>(3, 4, 1, 6);
  for (PoolingMode mode : {PoolingMode::kCorrelation, PoolingMode::kBaselineMeanStd}) {
    auto s = init_train_state<double>(tiny_resnet(), tiny_pooling(mode), 3, tiny_train());
    const auto warm = next_batch(s, data.train, 8, 24);
    accumulate_gradients(s.model, warm, 8, 0.2, 30.0, s.rng);  // initializes running statistics
    const auto batch = next_batch(s, data.train, 8, 24);
    std::mt19937_64 r1(0), r2(0);
    const auto full = accumulate_gradients(s.model, batch, 8, 0.2, 30.0, r1, {ops::BnMode::kEval});
    const auto split = accumulate_gradients(s.model, batch, 2, 0.2, 30.0, r2, {ops::BnMode::kEval});
    EXPECT_NEAR(full.loss, split.loss, 1e-10);
    for (std::size_t i = 0; i < full.grads.size(); ++i)
      EXPECT_LT(testing::max_abs_diff(full.grads[i], split.grads[i]), 1e-6) << to_string(mode) << " tensor " << i;
  }
}

TEST(Sgd, MismatchedStateThrows) {
  auto m = init_model<double>(tiny_resnet(), tiny_pooling(), 3, 4);
  OptState<double> empty;
  EXPECT_THROW(sgd_momentum_update(m, empty, {}, 0.1, 0.9), ShapeError);
}

// ---------------------------------------------------------------------------
// Learning-rate schedule.

TEST(LrSchedule, DecreasingLossNeverHalves) {
  TrainConfig cfg;
  LrState s;
  for (std::size_t step = 500; step <= 20000; step += 500) lr_schedule_update(s, step, 10.0 / step, cfg);
  EXPECT_EQ(s.halvings, 0u);
  EXPECT_EQ(s.lr, 0.2);
}

TEST(LrSchedule, FlatLossHalvesOncePerWindow) {
  TrainConfig cfg;
  LrState s;
  for (std::size_t step = 500; step <= 12500; step += 500) lr_schedule_update(s, step, 1.0, cfg);
  // First evaluation sets the best loss at 500; halvings at 3500, 6500, 9500, 12500.
  EXPECT_EQ(s.halvings, 4u);
  EXPECT_DOUBLE_EQ(s.lr, 0.2 / 16);
}

TEST(LrSchedule, PlateauTrace) {
  TrainConfig cfg;
  LrState s;
  std::vector<std::size_t> halved_at;
  for (std::size_t step = 500; step <= 8000; step += 500) {
    const double loss = step == 500 ? 1.0 : 0.9;
    const std::size_t before = s.halvings;
    lr_schedule_update(s, step, loss, cfg);
    if (s.halvings != before) halved_at.push_back(step);
  }
  // The last improvement is at 1000.
  EXPECT_EQ(halved_at, (std::vector<std::size_t>{4000, 7000}));
}

TEST(LrSchedule, ImprovementBelowToleranceDoesNotCount) {
  TrainConfig cfg;
  LrState s;
  lr_schedule_update(s, 500, 1.0, cfg);
  for (std::size_t step = 1000; step <= 3500; step += 500) lr_schedule_update(s, step, 1.0 - 1e-6 * step / 500, cfg);
  EXPECT_EQ(s.halvings, 1u);
}

// ---------------------------------------------------------------------------
// Training loop and checkpoints.

TEST(TrainLoop, SameSeedIsBitIdentical) {
  const auto data = toy_data<double>(3, 4, 1, 7);
  auto a = init_train_state<double>(tiny_resnet(), tiny_pooling(), 3, tiny_train());
  auto b = init_train_state<double>(tiny_resnet(), tiny_pooling(), 3, tiny_train());
  train_loop(a, data, tiny_train(), AamConfig{}, nullptr);
  train_loop(b, data, tiny_train(), AamConfig{}, nullptr);
  expect_same_state(a, b);
  EXPECT_EQ(a.log.size(), 3u);
}

TEST(TrainLoop, CheckpointRoundTripIsLossless) {
  const auto dir = testing::scratch_dir();
  const auto data = toy_data<float>(3, 4, 1, 8);
  auto cfg = tiny_train();
  cfg.total_steps = 3;
  auto s = init_train_state<float>(tiny_resnet(), tiny_pooling(), 3, cfg);
  train_loop(s, data, cfg, AamConfig{}, nullptr);
  save_checkpoint(dir / "ckpt", s, data.speakers, cfg, AamConfig{});
  auto back = load_checkpoint<float>(dir / "ckpt");
  EXPECT_EQ(back.speakers, data.speakers);
  expect_same_state(s, back.state);
  EXPECT_EQ(back.state.model.pooling.mode, PoolingMode::kCorrelation);
  EXPECT_EQ(back.state.model.resnet.input_dim, kFeat);
}

TEST(TrainLoop, ResumeReproducesUninterruptedRun) {
  const auto dir = testing::scratch_dir();
  const auto data = toy_data<double>(3, 4, 1, 9);
  auto cfg = tiny_train();
  cfg.checkpoint_every = 3;
  auto full = init_train_state<double>(tiny_resnet(), tiny_pooling(), 3, cfg);
  train_loop<double>(full, data, cfg, AamConfig{}, nullptr, [&](const TrainState<double>& s) {
    if (s.step == 3) save_checkpoint(dir / "mid", s, data.speakers, cfg, AamConfig{});
  });
  auto resumed = load_checkpoint<double>(dir / "mid");
  EXPECT_EQ(resumed.state.step, 3u);
  train_loop(resumed.state, data, cfg, AamConfig{}, nullptr);
  expect_same_state(full, resumed.state);
}

TEST(TrainLoop, HeldoutLossDecreases) {
  const auto data = toy_data<float>(4, 6, 2, 10);
  auto cfg = tiny_train();
  cfg.total_steps = 300;
  cfg.eval_cadence = 50;
  cfg.plateau_updates = 100;
  auto s = init_train_state<float>(tiny_resnet(), tiny_pooling(), 4, cfg);
  std::ostringstream log;
  train_loop(s, data, cfg, AamConfig{}, &log);
  ASSERT_EQ(s.log.size(), 6u);
  EXPECT_LT(s.log.back().heldout_loss, s.log.front().heldout_loss);
  EXPECT_NE(log.str().find("step 300 lr"), std::string::npos);
  for (const auto& e : s.log) EXPECT_TRUE(std::isfinite(e.heldout_loss));
}

TEST(TrainLoop, InputErrors) {
  auto data = toy_data<double>(3, 2, 0, 11);
  auto s = init_train_state<double>(tiny_resnet(), tiny_pooling(), 3, tiny_train());
  auto wrong = init_train_state<double>(tiny_resnet(), tiny_pooling(), 4, tiny_train());
  EXPECT_THROW(train_loop(wrong, data, tiny_train(), AamConfig{}, nullptr), ConfigError);
  data.train = {};
  EXPECT_THROW(train_loop(s, data, tiny_train(), AamConfig{}, nullptr), ConfigError);
  EXPECT_THROW((init_train_state<double>(tiny_resnet(), tiny_pooling(), 1, tiny_train())), ConfigError);
}

TEST(TrainLoop, EmptyCorpusThrows) {
  CorpusManifest m;
  m.speakers = sample_speakers(2, 1);
  m.speaker_splits = {"train", "train"};
  EXPECT_THROW(load_train_data<float>(m), ConfigError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.microbatch = 1;
  c.minibatch = 8;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.minibatch = 250;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.plateau_updates = 100;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.precision = "f16";
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(CopyCrop, WrapsShortUtterances) {
  auto src = Tensor<double>::from(Shape{3, 2}, {1, 2, 3, 4, 5, 6});
  std::vector<double> dst(8);
  copy_crop(src, 2, 4, dst.data());
  EXPECT_EQ(dst, (std::vector<double>{5, 6, 1, 2, 3, 4, 5, 6}));
}

TEST(Embeddings, StoreRoundTripAndScoring) {
  const auto dir = testing::scratch_dir();
  EmbeddingStore s;
  s.ids = {"a", "b", "c"};
  s.vectors = Tensor<double>::from(Shape{3, 2}, {1, 0, 2, 0, 0, 3});
  s.build_index();
  save_embeddings(dir / "emb", s);
  const auto back = load_embeddings(dir / "emb");
  EXPECT_EQ(back.ids, s.ids);
  EXPECT_EQ(back.vectors, s.vectors);
  const auto scores = score_trials(back, {{"a", "b", true}, {"a", "c", false}});
  EXPECT_DOUBLE_EQ(scores[0].score, 1.0);
  EXPECT_DOUBLE_EQ(scores[1].score, 0.0);
  try {
    score_trials(back, {{"a", "zz", true}});
    FAIL() << "expected an error";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("zz"), std::string::npos);
  }
}

}  // namespace
}  // namespace corrpool
