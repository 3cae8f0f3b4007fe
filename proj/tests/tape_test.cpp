// tests/tape_test.cpp

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
#include "corrpool/ops.hpp"
#include "corrpool/params.hpp"
#include "corrpool/verify/oracles.hpp"
#include "test_util.hpp"

namespace corrpool {
namespace {

using ops::mul;
using ops::sum;

TEST(Tape, BackwardRunsInReverseRecordingOrder) {
  Tape<double> tape;
  std::vector<std::string> order;
  Var<double> x = tape.param(Tensor<double>(Shape{}, 1.0));
  auto step = [&](const Var<double>& in, std::string name) {
    return tape.record(in.value(), {in}, [&order, name, id = in.id()](Tape<double>& tp, std::size_t self) {
      order.push_back(name);
      tp.grad(id)[0] += tp.grad(self)[0];
    }, name);
  };
  Var<double> a = step(x, "a");
  Var<double> b = step(a, "b");
  Var<double> c = step(b, "c");
  tape.backward(c);
  EXPECT_EQ(order, (std::vector<std::string>{"c", "b", "a"}));
  EXPECT_EQ(x.grad()[0], 1.0);
}

TEST(Tape, InputsPrecedeTheirOp) {
  Tape<double> tape;
  Var<double> x = tape.param(Tensor<double>(Shape{2}, 1.0));
  Var<double> y = sum(mul(x, x));
  EXPECT_LT(x.id(), y.id());
  EXPECT_EQ(y.id() + 1, tape.size());
}

TEST(Tape, NonScalarRootThrows) {
  Tape<double> tape;
  Var<double> x = tape.param(Tensor<double>(Shape{2}));
  EXPECT_THROW(tape.backward(x), ShapeError);
}

TEST(Tape, ForeignInputThrows) {
  Tape<double> t1, t2;
  Var<double> a = t1.param(Tensor<double>(Shape{1}));
  Var<double> b = t2.param(Tensor<double>(Shape{1}));
  EXPECT_THROW(ops::add(a, b), Error);
}

TEST(Tape, ConstantsNeedNoGradient) {
  Tape<double> tape;
  Var<double> c = tape.constant(Tensor<double>(Shape{3}, 2.0));
  Var<double> y = sum(mul(c, c));
  EXPECT_FALSE(y.requires_grad());
  Var<double> p = tape.param(Tensor<double>(Shape{3}, 1.0));
  Var<double> z = sum(mul(p, c));
  EXPECT_TRUE(z.requires_grad());
  tape.backward(z);
  for (double g : p.grad().values()) EXPECT_EQ(g, 2.0);
  EXPECT_FALSE(tape.has_grad(y.id()));
}

TEST(Tape, GradShapeMatchesValue) {
  std::mt19937_64 rng(1);
  Tape<double> tape;
  Var<double> x = tape.param(oracle::random_tensor(Shape{2, 3, 4}, rng));
  tape.backward(sum(mul(x, x)));
  EXPECT_EQ(x.grad().shape(), x.shape());
}

TEST(Tape, FirstNonFiniteNode) {
  Tape<double> tape;
  tape.constant(Tensor<double>(Shape{2}, 1.0));
  auto bad = Tensor<double>(Shape{2});
  bad[1] = std::numeric_limits<double>::infinity();
  tape.leaf(bad, false, "bad");
  ASSERT_TRUE(tape.first_non_finite().has_value());
  EXPECT_EQ(tape.name(*tape.first_non_finite()), "bad");
}

// Backward on sum_k L_k equals sum_k of the separate gradients.
TEST(Tape, GradientAccumulationIsLinear) {
  std::mt19937_64 rng(7);
  const auto x0 = oracle::random_tensor(Shape{5, 3}, rng);
  const auto w0 = oracle::random_tensor(Shape{3, 4}, rng);
  std::vector<Tensor<double>> targets;
  for (int k = 0; k < 4; ++k) targets.push_back(oracle::random_tensor(Shape{5, 4}, rng));

  auto loss_k = [&](Tape<double>& tape, const Var<double>& w, int k) {
    Var<double> y = ops::matmul(tape.constant(x0), w);
    return sum(mul(ops::relu(y), tape.constant(targets[k])));
  };

  Tensor<double> separate(w0.shape());
  for (int k = 0; k < 4; ++k) {
    Tape<double> tape;
    Var<double> w = tape.param(w0);
    tape.backward(loss_k(tape, w, k));
    for (std::size_t i = 0; i < separate.size(); ++i) separate[i] += w.grad()[i];
  }
  Tape<double> tape;
  Var<double> w = tape.param(w0);
  Var<double> total = loss_k(tape, w, 0);
  for (int k = 1; k < 4; ++k) total = ops::add(total, loss_k(tape, w, k));
  tape.backward(total);
  EXPECT_LT(testing::max_abs_diff(w.grad(), separate), 1e-10);
}

TEST(Tape, RepeatedBackwardResetsGradients) {
  Tape<double> tape;
  Var<double> x = tape.param(Tensor<double>(Shape{2}, 3.0));
  Var<double> y = sum(mul(x, x));
  tape.backward(y);
  tape.backward(y);
  for (double g : x.grad().values()) EXPECT_EQ(g, 6.0);
}

// ---------------------------------------------------------------------------
// ParamBinder.

TEST(ParamBinder, BindsEachTensorOnce) {
  Tape<double> tape;
  ParamBinder<double> bind(tape, true);
  Tensor<double> w(Shape{2}, 1.0);
  Var<double> a = bind(w), b = bind(w);
  EXPECT_EQ(a.id(), b.id());
  EXPECT_EQ(bind.grad(w), nullptr);
  tape.backward(sum(mul(a, b)));
  ASSERT_NE(bind.grad(w), nullptr);
  for (double g : bind.grad(w)->values()) EXPECT_EQ(g, 2.0);
}

TEST(ParamBinder, FrozenBindingIsConstant) {
  Tape<double> tape;
  ParamBinder<double> bind(tape, false);
  Tensor<double> w(Shape{2}, 1.0);
  EXPECT_FALSE(bind(w).requires_grad());
}

TEST(ParamBinder, AliasRedirectsBinding) {
  Tape<double> tape;
  ParamBinder<double> bind(tape, false);
  Tensor<double> w(Shape{2}, 1.0);
  Var<double> v = tape.param(Tensor<double>(Shape{2}, 5.0));
  bind.alias(w, v);
  EXPECT_EQ(bind(w).id(), v.id());
}

// ---------------------------------------------------------------------------
// grad_check.

TEST(GradCheck, SumHasUnitGradient) {
  std::mt19937_64 rng(2);
  const auto x = oracle::random_tensor(Shape{3, 4}, rng);
  Tape<double> tape;
  Var<double> v = tape.param(x);
  tape.backward(sum(v));
  for (double g : v.grad().values()) EXPECT_EQ(g, 1.0);
  auto res = grad_check([](Tape<double>&, const std::vector<Var<double>>& in) { return sum(in[0]); }, {x});
  EXPECT_LT(res.max_rel_error, 1e-10);
  EXPECT_EQ(res.checked, 12u);
}

TEST(GradCheck, SquaredNorm) {
  const auto x = Tensor<double>::from(Shape{2}, {1.0, 2.0});
  Tape<double> tape;
  Var<double> v = tape.param(x);
  tape.backward(sum(mul(v, v)));
  EXPECT_EQ(v.grad()[0], 2.0);
  EXPECT_EQ(v.grad()[1], 4.0);
  auto res = grad_check([](Tape<double>&, const std::vector<Var<double>>& in) { return sum(mul(in[0], in[0])); },
                        {x});
  EXPECT_LT(res.max_rel_error, 1e-8);
}

TEST(GradCheck, NonScalarOutputThrows) {
  const auto x = Tensor<double>::from(Shape{2}, {1.0, 2.0});
  EXPECT_THROW(grad_check([](Tape<double>&, const std::vector<Var<double>>& in) { return in[0]; }, {x}),
               ShapeError);
}

TEST(GradCheck, DetectsWrongBackward) {
  const auto x = Tensor<double>::from(Shape{3}, {0.5, 1.0, -2.0});
  auto wrong = [](Tape<double>& tape, const std::vector<Var<double>>& in) {
    Var<double> y = tape.record(in[0].value(), {in[0]}, [id = in[0].id()](Tape<double>& tp, std::size_t self) {
      for (std::size_t i = 0; i < 3; ++i) tp.grad(id)[i] += 2.0 * tp.grad(self)[i];
    }, "double_counted");
    return sum(y);
  };
  EXPECT_GT(grad_check(wrong, {x}).max_rel_error, 0.4);
}

TEST(GradCheck, SkipAndSubsample) {
  std::mt19937_64 rng(4);
  const auto x = oracle::random_tensor(Shape{100}, rng);
  GradCheckOptions opts;
  opts.max_coords = 10;
  opts.skip = [](std::size_t, std::size_t i, double) { return i == 0; };
  auto res = grad_check([](Tape<double>&, const std::vector<Var<double>>& in) { return sum(mul(in[0], in[0])); },
                        {x}, opts);
  EXPECT_EQ(res.skipped, 1u);
  EXPECT_EQ(res.checked, 9u);
}

}  // namespace
}  // namespace corrpool
