// tests/tensor_test.cpp

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

#include <cstring>
#include <sstream>

#include <gtest/gtest.h>

#include "corrpool/serialize.hpp"
#include "test_util.hpp"

namespace corrpool {
namespace {

TEST(Tensor, ShapeAndSize) {
  Tensor<double> t(Shape{2, 3, 4});
  EXPECT_EQ(t.rank(), 3u);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.size(), shape_numel(t.shape()));
  for (double v : t.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(shape_str(t.shape()), "[2,3,4]");
}

TEST(Tensor, ScalarHasOneElement) {
  Tensor<float> s(Shape{}, 2.5f);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s[0], 2.5f);
}

TEST(Tensor, DataLengthMismatchThrows) {
  EXPECT_THROW(Tensor<double>(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Tensor, RowMajorIndexing) {
  auto t = Tensor<double>::from(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
  EXPECT_EQ(t.at(0, 2), 2.0);
  EXPECT_EQ(t.at(1, 0), 3.0);
  EXPECT_EQ(t.at(1, 2), 5.0);
}

TEST(Tensor, ReshapeKeepsValues) {
  auto t = Tensor<double>::from(Shape{2, 3}, {0, 1, 2, 3, 4, 5});
  auto r = t.reshaped(Shape{3, 2});
  EXPECT_EQ(r.at(2, 1), 5.0);
  EXPECT_THROW(t.reshaped(Shape{4, 2}), ShapeError);
}

TEST(Tensor, StorageIsAligned) {
  for (std::size_t n : {1u, 3u, 17u, 1000u}) {
    Tensor<float> t(Shape{n});
    EXPECT_EQ(reinterpret_cast<std::uintptr_t>(t.data()) % 64, 0u);
  }
}

TEST(Tensor, FiniteCheck) {
  Tensor<double> t(Shape{3});
  EXPECT_TRUE(t.all_finite());
  t[1] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_FALSE(t.all_finite());
}

TEST(Tensor, CastRoundTrip) {
  auto t = Tensor<double>::from(Shape{2}, {0.5, -1.25});
  EXPECT_EQ(t.cast<float>().cast<double>(), t);
}

// ---------------------------------------------------------------------------
// CPT1 serialization.

TEST(Serialize, ByteLayout) {
  auto t = Tensor<float>::from(Shape{2, 1}, {1.0f, -2.0f});
  std::ostringstream os;
  write_tensor(os, t);
  const std::string b = os.str();
  ASSERT_EQ(b.size(), 4u + 1 + 1 + 2 * 8 + 2 * 4);
  EXPECT_EQ(b.substr(0, 4), "CPT1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1u);  // f32
  EXPECT_EQ(static_cast<unsigned char>(b[5]), 2u);  // rank
  std::uint64_t d0 = 0, d1 = 0;
  std::memcpy(&d0, b.data() + 6, 8);
  std::memcpy(&d1, b.data() + 14, 8);
  EXPECT_EQ(d0, 2u);
  EXPECT_EQ(d1, 1u);
  float v[2];
  std::memcpy(v, b.data() + 22, 8);
  EXPECT_EQ(v[0], 1.0f);
  EXPECT_EQ(v[1], -2.0f);
}

TEST(Serialize, RoundTripBothPrecisions) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  Tensor<double> d(Shape{3, 4, 5});
  for (auto& v : d.values()) v = nd(rng);
  std::stringstream ss;
  write_tensor(ss, d);
  EXPECT_EQ(read_tensor<double>(ss), d);

  Tensor<float> f = d.cast<float>();
  std::stringstream sf;
  write_tensor(sf, f);
  EXPECT_EQ(read_tensor<float>(sf), f);
}

TEST(Serialize, ConcatenatedRecords) {
  std::stringstream ss;
  auto a = Tensor<double>::from(Shape{2}, {1, 2});
  auto b = Tensor<double>::from(Shape{1, 1}, {3});
  write_tensor(ss, a);
  write_tensor(ss, b);
  EXPECT_EQ(read_tensor<double>(ss), a);
  EXPECT_EQ(read_tensor<double>(ss), b);
}

TEST(Serialize, RejectsBadInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_tensor<double>(bad), IoError);
  std::stringstream empty;
  EXPECT_THROW(read_tensor<double>(empty), IoError);

  std::stringstream ss;
  write_tensor(ss, Tensor<double>(Shape{4}));
  std::string s = ss.str();
  s.resize(s.size() - 3);
  std::stringstream truncated(s);
  EXPECT_THROW(read_tensor<double>(truncated), IoError);
}

TEST(Serialize, FileRoundTrip) {
  const auto dir = testing::scratch_dir();
  auto t = Tensor<float>::from(Shape{3}, {1, 2, 3});
  save_tensor(dir / "t.cpt", t);
  EXPECT_EQ(load_tensor<float>(dir / "t.cpt"), t);
  EXPECT_THROW(load_tensor<float>(dir / "missing.cpt"), IoError);
}

}  // namespace
}  // namespace corrpool
