// tests/loss_test.cpp

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

#include "corrpool/grad_check.hpp"
#include "corrpool/loss.hpp"
#include "corrpool/verify/oracles.hpp"
#include "test_util.hpp"

namespace corrpool {
namespace {

using oracle::random_tensor;
using Labels = std::vector<std::size_t>;

struct Eval {
  double loss;
  Tensor<double> logits, cosines;
};

Eval run_aam(const Tensor<double>& emb, const Labels& labels, const Tensor<double>& head, double m, double s = 30.0) {
  Tape<double> tape;
  auto out = aam_loss(tape.constant(emb), labels, tape.constant(head), m, s);
  return {out.loss.value()[0], out.logits.value(), out.cosines.value()};
}

TEST(MarginSchedule, Endpoints) {
  const AamConfig cfg;
  EXPECT_DOUBLE_EQ(margin_at_step(0, 900, cfg), 0.1);
  EXPECT_DOUBLE_EQ(margin_at_step(299, 900, cfg), 0.1);
  EXPECT_DOUBLE_EQ(margin_at_step(300, 900, cfg), 0.2);
  EXPECT_DOUBLE_EQ(margin_at_step(450, 900, cfg), 0.2);
  EXPECT_DOUBLE_EQ(margin_at_step(600, 900, cfg), 0.3);
  EXPECT_DOUBLE_EQ(margin_at_step(900, 900, cfg), 0.3);
  EXPECT_EQ(margin_index_at_step(899, 900, cfg), 2u);
}

TEST(MarginSchedule, NondecreasingInStep) {
  const AamConfig cfg;
  double prev = 0.0;
  for (std::size_t s = 0; s <= 1000; ++s) {
    const double m = margin_at_step(s, 1000, cfg);
    EXPECT_GE(m, prev);
    prev = m;
  }
}

TEST(AamConfig, Validation) {
  AamConfig c;
  EXPECT_NO_THROW(c.validate());
  c.scale = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.margin_schedule = {0.3, 0.2, 0.1};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.schedule_boundaries = {0.5};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.schedule_boundaries = {0.7, 0.3};
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.margin_schedule = {0.1, 0.2, 2.0};
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AamLoss, MatchesOracle) {
  std::mt19937_64 rng(1);
  const auto emb = random_tensor(Shape{6, 16}, rng), head = random_tensor(Shape{16, 5}, rng);
  const Labels labels{0, 4, 2, 2, 1, 3};
  for (double m : {0.0, 0.1, 0.3})
    for (double s : {1.0, 30.0})
      EXPECT_NEAR(run_aam(emb, labels, head, m, s).loss, oracle::aam_loss(emb, labels, head, m, s), 1e-10);
}

TEST(AamLoss, ZeroMarginIsScaledCosineSoftmax) {
  std::mt19937_64 rng(2);
  const auto emb = random_tensor(Shape{4, 8}, rng), head = random_tensor(Shape{8, 3}, rng);
  const Labels labels{2, 0, 1, 1};
  const auto r = run_aam(emb, labels, head, 0.0);
  Tensor<double> logits = r.cosines;
  for (auto& v : logits.values()) v *= 30.0;
  EXPECT_NEAR(r.loss, oracle::softmax_cross_entropy(logits, labels), 1e-10);
}

TEST(AamLoss, AlignedEmbeddingLogit) {
  std::mt19937_64 rng(3);
  const auto head = random_tensor(Shape{8, 4}, rng);
  Tensor<double> emb(Shape{1, 8});
  for (std::size_t i = 0; i < 8; ++i) emb.at(0, i) = 2.5 * head.at(i, 1);
  const auto r = run_aam(emb, {1}, head, 0.2);
  EXPECT_NEAR(r.cosines.at(0, 1), 1.0, 1e-12);
  // Clamping to 1 - 1e-7 moves the angle by about 4.5e-4 rad.
  EXPECT_NEAR(r.logits.at(0, 1), 30.0 * std::cos(0.2), 5e-3);
}

TEST(AamLoss, RowRescalingInvariance) {
  std::mt19937_64 rng(4);
  const auto emb = random_tensor(Shape{5, 12}, rng), head = random_tensor(Shape{12, 6}, rng);
  const Labels labels{5, 0, 3, 1, 1};
  const double base = run_aam(emb, labels, head, 0.2).loss;
  std::uniform_real_distribution<double> u(0.01, 100.0);
  Tensor<double> scaled = emb;
  for (std::size_t r = 0; r < 5; ++r) {
    const double a = u(rng);
    for (std::size_t c = 0; c < 12; ++c) scaled.at(r, c) *= a;
  }
  Tensor<double> head_scaled = head;
  for (std::size_t c = 0; c < 6; ++c) {
    const double a = u(rng);
    for (std::size_t r = 0; r < 12; ++r) head_scaled.at(r, c) *= a;
  }
  EXPECT_NEAR(run_aam(scaled, labels, head_scaled, 0.2).loss, base, 1e-10);
}

// For target angles below pi - m, a larger margin lowers the target logit
// and raises the loss.
TEST(AamLoss, MarginMonotonicity) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto emb = random_tensor(Shape{3, 10}, rng), head = random_tensor(Shape{10, 4}, rng);
    const Labels labels{rng() % 4, rng() % 4, rng() % 4};
    double prev = run_aam(emb, labels, head, 0.0).loss;
    for (double m : {0.1, 0.2, 0.3, 0.4}) {
      const double cur = run_aam(emb, labels, head, m).loss;
      EXPECT_GT(cur, prev) << "trial " << trial << " m " << m;
      prev = cur;
    }
  }
}

TEST(AamLoss, LogitsBoundedByScale) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const auto emb = random_tensor(Shape{8, 6}, rng, 10.0), head = random_tensor(Shape{6, 5}, rng);
    Labels labels(8);
    for (auto& l : labels) l = rng() % 5;
    const auto r = run_aam(emb, labels, head, 0.3);
    for (double v : r.logits.values()) EXPECT_LE(std::abs(v), 30.0 + 1e-12);
    for (double v : r.cosines.values()) EXPECT_LE(std::abs(v), 1.0 + 1e-12);
    EXPECT_TRUE(std::isfinite(r.loss));
    EXPECT_GE(r.loss, 0.0);
  }
}

TEST(AamLoss, LabelOutOfRangeThrows) {
  Tape<double> tape;
  auto emb = tape.constant(Tensor<double>(Shape{2, 4}, 1.0));
  auto head = tape.constant(Tensor<double>(Shape{4, 3}, 1.0));
  EXPECT_THROW(aam_loss(emb, Labels{0, 3}, head, 0.1, 30.0), ConfigError);
  EXPECT_THROW(aam_loss(emb, Labels{0}, head, 0.1, 30.0), ShapeError);
  EXPECT_THROW(aam_loss(tape.constant(Tensor<double>(Shape{2, 5})), Labels{0, 1}, head, 0.1, 30.0), ShapeError);
}

TEST(AamLoss, Gradients) {
  std::mt19937_64 rng(7);
  const auto emb = random_tensor(Shape{4, 64}, rng), head = random_tensor(Shape{64, 5}, rng);
  const Labels labels{1, 4, 0, 1};
  for (double m : {0.0, 0.2}) {
    auto res = grad_check([&](Tape<double>&, const std::vector<Var<double>>& in) {
      return aam_loss(in[0], labels, in[1], m, 30.0).loss;
    }, {emb, head});
    EXPECT_LT(res.max_rel_error, 1e-5) << "m " << m << " input " << res.worst_input;
  }
}

TEST(SoftmaxCrossEntropy, UniformLogits) {
  Tape<double> tape;
  auto l = softmax_cross_entropy(tape.constant(Tensor<double>(Shape{3, 7}, 2.0)), Labels{0, 6, 3});
  EXPECT_NEAR(l.value()[0], std::log(7.0), 1e-12);
}

TEST(SoftmaxCrossEntropy, LargeLogitsStayFinite) {
  auto logits = Tensor<double>::from(Shape{2, 3}, {1000.0, -1000.0, 0.0, -800.0, 900.0, 900.0});
  Tape<double> tape;
  Var<double> v = tape.param(logits);
  auto l = softmax_cross_entropy(v, Labels{0, 1});
  tape.backward(l);
  EXPECT_NEAR(l.value()[0], std::log(2.0) / 2, 1e-12);
  EXPECT_TRUE(v.grad().all_finite());
}

}  // namespace
}  // namespace corrpool
