// Copyright 2026 The cdkformer Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cdk/autodiff.hpp"
#include "cdk/grad_check.hpp"
#include "cdk/layers.hpp"

namespace cdk {
namespace {

Tensor random_tensor(Shape shape, RngStream& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

// ---- fourier_embed --------------------------------------------------------

TEST(FourierEmbed, ZerosGiveSinZeroCosOne) {
  const Tensor out = fourier_embed(Tensor::zeros({3, 4}), 2);
  ASSERT_EQ(out.shape(), (Shape{3, 16}));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t f = 0; f < 4; ++f)
      for (std::size_t b = 0; b < 2; ++b) {
        EXPECT_EQ(out.at(r, f * 4 + b), 0.0);
        EXPECT_EQ(out.at(r, f * 4 + 2 + b), 1.0);
      }
}

TEST(FourierEmbed, ShapeWithEightBands) {
  EXPECT_EQ(fourier_embed(Tensor::zeros({5, 6}), 8).shape(), (Shape{5, 96}));
}

TEST(FourierEmbed, HalfWithOneBand) {
  const Tensor out = fourier_embed(Tensor({1, 1}, {0.5}), 1);
  EXPECT_NEAR(out[0], 1.0, 1e-15);
  EXPECT_NEAR(out[1], 0.0, 1e-15);
}

TEST(FourierEmbed, RejectsNonFiniteAndZeroBands) {
  EXPECT_THROW(fourier_embed(Tensor({1, 1}, {NAN}), 2), NumericError);
  EXPECT_THROW(fourier_embed(Tensor({1, 1}, {0.0}), 0), ValidationError);
}

// ---- softmax ---------------------------------------------------------------

TEST(Softmax, Examples) {
  auto a = softmax_rows(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  auto b = softmax_rows(Tensor({1, 2}, {std::log(2.0), 0.0}));
  EXPECT_NEAR(b[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(b[1], 1.0 / 3.0, 1e-15);
  auto c = softmax_rows(Tensor({1, 2}, {1000.0, 0.0}));
  EXPECT_EQ(c[0], 1.0);
  EXPECT_EQ(c[1], 0.0);
  EXPECT_THROW(softmax_rows(Tensor({1, 2}, {INFINITY, 0.0})), NumericError);
}

TEST(Softmax, RowsSumToOneAndShiftInvariant) {
  RngStream rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, 5.0);
    Tensor shifted = x;
    const double c = rng.uniform(-100, 100);
    for (auto& v : shifted.data()) v += c;
    const Tensor y = softmax_rows(x);
    const Tensor ys = softmax_rows(shifted);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t k = 0; k < 7; ++k) {
        EXPECT_GE(y.at(r, k), 0.0);
        s += y.at(r, k);
      }
      EXPECT_LT(std::abs(s - 1.0), 1e-12);
    }
    EXPECT_LT(max_abs_diff(y, ys), 1e-12);
  }
}

// ---- attention --------------------------------------------------------------

TEST(Attention, SingleKeyReturnsProjectedValueRow) {
  RngStream rng(3);
  ParamStore store;
  MultiHeadAttention mha(store, "mha", 8, 2, rng);
  Tape tape;
  ForwardCtx ctx{tape};
  const Var q = tape.constant(random_tensor({3, 8}, rng));
  const Var kv = tape.constant(random_tensor({1, 8}, rng));
  const Var out = mha(ctx, q, kv, kv);
  // Expected: (kv Wv + bv) Wo + bo for every query row.
  const Var expect = mha.out_proj()(ctx, mha.v_proj()(ctx, kv));
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(out.value().at(r, c), expect.value().at(0, c));
}

TEST(Attention, IdenticalKeysSplitEvenly) {
  Tape tape;
  RngStream rng(4);
  const Var q = tape.constant(random_tensor({2, 4}, rng));
  Tensor kt = random_tensor({1, 4}, rng);
  Tensor k2({2, 4});
  for (std::size_t c = 0; c < 4; ++c) k2.at(0, c) = k2.at(1, c) = kt[c];
  const Var k = tape.constant(k2);
  std::vector<double> w;
  attention(q, k, k, 1, 1, {}, &w);
  for (double x : w) EXPECT_DOUBLE_EQ(x, 0.5);
}

TEST(Attention, WeightRowsSumToOne) {
  RngStream rng(5);
  Tape tape;
  const Var q = tape.constant(random_tensor({3, 8}, rng));
  const Var k = tape.constant(random_tensor({5, 8}, rng));
  std::vector<double> w;
  attention(q, k, k, 4, 1, {}, &w);
  ASSERT_EQ(w.size(), 4u * 3 * 5);
  for (std::size_t row = 0; row < 12; ++row) {
    double s = 0.0;
    for (std::size_t j = 0; j < 5; ++j) s += w[row * 5 + j];
    EXPECT_LT(std::abs(s - 1.0), 1e-12);
  }
}

TEST(Attention, MaskedKeysGetZeroWeight) {
  RngStream rng(6);
  Tape tape;
  const Var q = tape.constant(random_tensor({2, 4}, rng));
  const Var k = tape.constant(random_tensor({3, 4}, rng));
  std::vector<double> w;
  attention(q, k, k, 2, 1, {1, 0, 1}, &w);
  for (std::size_t row = 0; row < 4; ++row) EXPECT_EQ(w[row * 3 + 1], 0.0);
  const Var all_masked = attention(q, k, k, 2, 1, {0, 0, 0});
  for (double v : all_masked.value().data()) EXPECT_EQ(v, 0.0);
}

TEST(Attention, RejectsBadShapes) {
  Tape tape;
  const Var q = tape.constant(Tensor::zeros({2, 6}));
  const Var k = tape.constant(Tensor::zeros({2, 6}));
  EXPECT_THROW(attention(q, k, k, 4, 1), ValidationError);
  const Var k5 = tape.constant(Tensor::zeros({2, 5}));
  EXPECT_THROW(attention(q, k5, k5, 1, 1), ValidationError);
  ParamStore store;
  RngStream rng(1);
  EXPECT_THROW(MultiHeadAttention(store, "bad", 6, 4, rng), ValidationError);
}

// ---- layer norm ----------------------------------------------------------------

TEST(LayerNorm, Examples) {
  Tape tape;
  const Var g3 = tape.constant(Tensor::filled({3}, 1.0));
  const Var b3 = tape.constant(Tensor::zeros({3}));
  const Var c = layer_norm(tape.constant(Tensor({1, 3}, {4.0, 4.0, 4.0})), g3, b3);
  for (double v : c.value().data()) EXPECT_EQ(v, 0.0);

  const Var g2 = tape.constant(Tensor::filled({2}, 1.0));
  const Var b2 = tape.constant(Tensor::zeros({2}));
  const Var pm = layer_norm(tape.constant(Tensor({1, 2}, {1.0, -1.0})), g2, b2);
  const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
  EXPECT_NEAR(pm.value()[0], expect, 1e-15);
  EXPECT_NEAR(pm.value()[1], -expect, 1e-15);
}

TEST(LayerNorm, RandomSliceIsStandardized) {
  RngStream rng(8);
  Tape tape;
  const Var x = tape.constant(random_tensor({1, 64}, rng, 3.0));
  const Var y = layer_norm(x, tape.constant(Tensor::filled({64}, 1.0)),
                           tape.constant(Tensor::zeros({64})));
  double mean = 0.0, var = 0.0;
  for (double v : y.value().data()) mean += v;
  mean /= 64.0;
  for (double v : y.value().data()) var += (v - mean) * (v - mean);
  var /= 64.0;
  EXPECT_LT(std::abs(mean), 1e-9);
  EXPECT_LT(std::abs(var - 1.0), 1e-3);
}

// ---- losses -------------------------------------------------------------------

TEST(SmoothL1, Examples) {
  const Tensor gt({1, 2}, {3.0, -1.0});
  EXPECT_EQ(smooth_l1(gt, gt), 0.0);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor({1, 2}, {3.5, -1.0}), gt), 0.125);
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor({1, 2}, {5.0, -1.0}), gt), 1.5);
  EXPECT_THROW(smooth_l1(Tensor({2, 2}), gt), ValidationError);
}

TEST(SmoothL1, AveragesOverTimesteps) {
  const Tensor gt = Tensor::zeros({2, 2});
  // Step 0: (0.5, 0) -> 0.125; step 1: (2, 0) -> 1.5; mean over 2 steps.
  EXPECT_DOUBLE_EQ(smooth_l1(Tensor({2, 2}, {0.5, 0.0, 2.0, 0.0}), gt), (0.125 + 1.5) / 2.0);
}

TEST(CrossEntropy, Examples) {
  Tensor onehot = Tensor::zeros({6});
  onehot[2] = 1.0;
  EXPECT_EQ(cross_entropy(onehot, onehot), 0.0);
  EXPECT_NEAR(cross_entropy(Tensor::filled({6}, 1.0 / 6.0), onehot), std::log(6.0), 1e-12);
  EXPECT_NEAR(std::log(6.0), 1.7918, 1e-4);
  Tensor miss = Tensor::zeros({6});
  miss[0] = 1.0;
  EXPECT_NEAR(cross_entropy(miss, onehot), -std::log(1e-12), 1e-9);
  EXPECT_NEAR(-std::log(1e-12), 27.631, 1e-3);
  EXPECT_THROW(cross_entropy(Tensor::filled({6}, 0.5), onehot), ValidationError);
  EXPECT_THROW(cross_entropy(Tensor::filled({6}, 1.0 / 6.0), Tensor::zeros({6})), ValidationError);
}

// ---- gradient checks ------------------------------------------------------------

TEST(GradCheck, QuadraticIsExact) {
  RngStream rng(1);
  Tensor x = random_tensor({10}, rng);
  auto r = grad_check([&](Tape& t) { return sum_all(mul(t.param(x), t.param(x))); }, {&x});
  EXPECT_EQ(r.coords_checked, 10u);
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(GradCheck, NonFiniteLossThrows) {
  Tensor x = Tensor::filled({2}, 1.0);
  auto f = [&](Tape& t) {
    const Var p = t.param(x);
    return sum_all(scale(p, x[0] > 1.0 ? NAN : 1.0));
  };
  EXPECT_THROW(grad_check(f, {&x}), NumericError);
}

class OpGradients : public ::testing::Test {
 protected:
  RngStream rng{42};
  // Projects an op output onto a fixed random direction so every output
  // coordinate contributes to the checked scalar.
  Var project(Var y, std::uint64_t seed) {
    RngStream r(seed);
    return sum_all(mul(y, y.tape().constant(random_tensor(y.value().shape(), r))));
  }
  void expect_ok(const std::function<Var(Tape&)>& f, std::vector<Tensor*> targets,
                 double tol = 1e-4) {
    const auto r = grad_check(f, targets);
    EXPECT_GT(r.coords_checked, 0u);
    EXPECT_LT(r.max_rel_error, tol);
  }
};

TEST_F(OpGradients, ElementwiseAndLinear) {
  Tensor a = random_tensor({4, 3}, rng), b = random_tensor({4, 3}, rng);
  Tensor w = random_tensor({3, 5}, rng), bias = random_tensor({5}, rng);
  expect_ok([&](Tape& t) {
    const Var x = t.param(a), y = t.param(b);
    const Var z = add(sub(mul(x, y), scale(y, 0.3)), sigmoid(x));
    return project(linear(z, t.param(w), t.param(bias)), 1);
  }, {&a, &b, &w, &bias});
}

TEST_F(OpGradients, ReluAwayFromKink) {
  Tensor a = random_tensor({5, 4}, rng);
  for (auto& v : a.data()) v += v > 0 ? 0.1 : -0.1;
  expect_ok([&](Tape& t) { return project(relu(t.param(a)), 2); }, {&a});
}

TEST_F(OpGradients, SoftmaxAndLayerNorm) {
  Tensor a = random_tensor({3, 6}, rng), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
  expect_ok([&](Tape& t) { return project(softmax_rows(t.param(a)), 3); }, {&a});
  expect_ok([&](Tape& t) {
    return project(layer_norm(t.param(a), t.param(g), t.param(b)), 4);
  }, {&a, &g, &b});
}

TEST_F(OpGradients, AttentionCoreWithGroupsAndMask) {
  Tensor q = random_tensor({6, 8}, rng), k = random_tensor({4, 8}, rng), v = random_tensor({4, 8}, rng);
  expect_ok([&](Tape& t) {
    return project(attention(t.param(q), t.param(k), t.param(v), 2, 2, {1, 1, 0, 1}), 5);
  }, {&q, &k, &v});
}

TEST_F(OpGradients, MultiHeadAttentionLayer) {
  ParamStore store;
  MultiHeadAttention mha(store, "mha", 8, 4, rng);
  Tensor q = random_tensor({3, 8}, rng), m = random_tensor({5, 8}, rng);
  std::vector<Tensor*> targets{&q, &m};
  for (auto& p : store) targets.push_back(&p.value);
  expect_ok([&](Tape& t) {
    ForwardCtx ctx{t};
    return project(mha(ctx, t.param(q), t.param(m), t.param(m)), 6);
  }, targets);
}

TEST_F(OpGradients, StructuralOps) {
  Tensor a = random_tensor({6, 3}, rng), b = random_tensor({6, 2}, rng), c = random_tensor({2, 3}, rng);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += 0.01 * static_cast<double>(i);  // untie maxima
  const std::vector<std::size_t> seg{0, 2, 6};
  expect_ok([&](Tape& t) {
    const Var x = t.param(a);
    const Var cat = concat_cols({x, t.param(b)});
    const Var rows = concat_rows({x, t.param(c)});
    const Var s1 = project(segment_max(x, seg), 7);
    const Var s2 = project(segment_mean(x, seg), 8);
    const Var s3 = project(segment_broadcast(t.param(c), seg), 9);
    const Var s4 = project(gather_rows(rows, {7, 0, 3, 7}), 10);
    const Var s5 = project(slice_rows(cat, 1, 4), 11);
    const Var s6 = project(cumsum_blocks(x, 3), 12);
    return add(add(add(s1, s2), add(s3, s4)), add(s5, s6));
  }, {&a, &b, &c});
}

TEST_F(OpGradients, GatingAndBroadcast) {
  Tensor e = random_tensor({4, 3}, rng), g = random_tensor({4, 2}, rng);
  Tensor qa = random_tensor({4, 3}, rng), qb = random_tensor({4, 3}, rng);
  Tensor m = random_tensor({2, 3}, rng);
  expect_ok([&](Tape& t) {
    const Var gate = softmax_rows(t.param(g));
    const Var s1 = project(mul_by_column(t.param(e), gate, 1), 13);
    const Var s2 = project(gated_mix(t.param(qa), t.param(qb), sigmoid(t.param(e))), 14);
    const Var s3 = project(broadcast_add_modes(t.param(m), t.param(qa)), 15);
    return add(add(s1, s2), s3);
  }, {&e, &g, &qa, &qb, &m});
}

TEST_F(OpGradients, FourierAndLosses) {
  Tensor x = random_tensor({3, 2}, rng, 0.3);
  expect_ok([&](Tape& t) { return project(fourier_embed(t.param(x), 3), 16); }, {&x});
  Tensor pred = random_tensor({5, 2}, rng, 2.0);
  const Tensor gt = random_tensor({5, 2}, rng, 2.0);
  expect_ok([&](Tape& t) { return smooth_l1(t.param(pred), gt); }, {&pred});
  Tensor logits = random_tensor({1, 6}, rng);
  Tensor target = Tensor::zeros({1, 6});
  target[4] = 1.0;
  expect_ok([&](Tape& t) { return cross_entropy(softmax_rows(t.param(logits)), target); },
            {&logits});
}

TEST_F(OpGradients, EncoderAndMoeLayers) {
  ParamStore store;
  EncoderLayer enc(store, "enc", 8, 2, 16, rng);
  MoeLayer moe(store, "moe", 8, 8, 3, rng);
  Tensor x = random_tensor({6, 8}, rng);
  std::vector<Tensor*> targets{&x};
  for (auto& p : store) targets.push_back(&p.value);
  expect_ok([&](Tape& t) {
    ForwardCtx ctx{t};
    const Var h = enc(ctx, t.param(x), 2, {1, 1, 0, 1, 1, 1});
    return project(moe(ctx, h), 17);
  }, targets);
}

TEST(Dropout, DeterministicGivenStreamState) {
  RngStream data(9);
  const Tensor x = random_tensor({4, 4}, data);
  Tape t1, t2;
  RngStream r1(77), r2(77);
  const Var a = dropout(t1.constant(x), 0.3, r1);
  const Var b = dropout(t2.constant(x), 0.3, r2);
  EXPECT_EQ(a.value().storage(), b.value().storage());
  Tape t3;
  RngStream r3(77);
  EXPECT_EQ(dropout(t3.constant(x), 0.0, r3).value().storage(), x.storage());
}

TEST(RngStream, ReproducibleAndIndependent) {
  RngStream a(5), b(5);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
  RngStream c(5, 50);
  RngStream d(5);
  for (int i = 0; i < 50; ++i) d.next_u64();
  EXPECT_EQ(c.next_u64(), d.next_u64());
  EXPECT_NE(RngStream(5).substream(1).next_u64(), RngStream(5).substream(2).next_u64());
}

TEST(ParamStore, RejectsDuplicateNames) {
  ParamStore store;
  store.add("a", {2});
  EXPECT_THROW(store.add("a", {3}), ValidationError);
  EXPECT_EQ(store.total_size(), 2u);
}

}  // namespace
}  // namespace cdk
