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

#include <Eigen/Dense>
#include <cmath>

#include "cdk/grad_check.hpp"
#include "cdk/model.hpp"

namespace cdk {
namespace {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;

// ---- plain Eigen oracle for the layers ------------------------------------------------

MatrixXd to_mat(const Tensor& t) {
  MatrixXd m(t.rows(), t.cols());
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m(r, c) = t.at(r, c);
  return m;
}

Tensor to_tensor(const MatrixXd& m) {
  Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(r, c) = m(r, c);
  return t;
}

RowVectorXd to_row(const Tensor& t) {
  RowVectorXd v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) v(i) = t[i];
  return v;
}

MatrixXd o_linear(const Linear& l, const MatrixXd& x) {
  MatrixXd y = x * to_mat(l.weight().value);
  if (l.bias()) y.rowwise() += to_row(l.bias()->value);
  return y;
}

MatrixXd o_mlp(const Mlp& m, MatrixXd x) {
  for (std::size_t i = 0; i < m.layers().size(); ++i) {
    x = o_linear(m.layers()[i], x);
    if (i + 1 < m.layers().size()) x = x.cwiseMax(0.0);
  }
  return x;
}

MatrixXd o_layer_norm(const LayerNorm& ln, const MatrixXd& x) {
  MatrixXd y(x.rows(), x.cols());
  const RowVectorXd g = to_row(ln.gain().value), b = to_row(ln.bias().value);
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    y.row(r) = ((x.row(r).array() - mu) / std::sqrt(var + 1e-5)).matrix().cwiseProduct(g) + b;
  }
  return y;
}

MatrixXd o_softmax(MatrixXd s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    s.row(r) = (s.row(r).array() - s.row(r).maxCoeff()).exp();
    s.row(r) /= s.row(r).sum();
  }
  return s;
}

MatrixXd o_mha(const MultiHeadAttention& a, const MatrixXd& q, const MatrixXd& kv) {
  const MatrixXd qp = o_linear(a.q_proj(), q), kp = o_linear(a.k_proj(), kv), vp = o_linear(a.v_proj(), kv);
  const Eigen::Index dh = qp.cols() / static_cast<Eigen::Index>(a.heads());
  MatrixXd out(q.rows(), qp.cols());
  for (Eigen::Index h = 0; h < static_cast<Eigen::Index>(a.heads()); ++h) {
    const MatrixXd w = o_softmax(qp.middleCols(h * dh, dh) * kp.middleCols(h * dh, dh).transpose() /
                                 std::sqrt(static_cast<double>(dh)));
    out.middleCols(h * dh, dh) = w * vp.middleCols(h * dh, dh);
  }
  return o_linear(a.out_proj(), out);
}

MatrixXd o_moe(const MoeLayer& m, const MatrixXd& x, MatrixXd* gate_out = nullptr) {
  const MatrixXd g = o_softmax(o_linear(m.gate(), x));
  if (gate_out) *gate_out = g;
  MatrixXd acc = MatrixXd::Zero(x.rows(), x.cols());
  for (std::size_t k = 0; k < m.experts(); ++k)
    acc += (o_mlp(m.expert(k), x).array().colwise() * g.col(static_cast<Eigen::Index>(k)).array()).matrix();
  return acc;
}

MatrixXd o_self_block(const MultistreamBlock& b, MatrixXd q) {
  const MatrixXd h = o_layer_norm(b.self_norm(), q);
  q += o_mha(b.self_attention(), h, h);
  return q + o_mlp(b.mlp(), o_layer_norm(b.mlp_norm(), q));
}

MatrixXd o_block(const MultistreamBlock& b, MatrixXd q, const std::vector<MatrixXd>& streams) {
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const auto& s = b.slots()[i];
    q += o_mha(s.cross, o_layer_norm(s.ln_query, q), o_layer_norm(s.ln_stream, streams[i]));
    q += o_moe(s.moe, q);
  }
  return o_self_block(b, q);
}

MatrixXd random_mat(Eigen::Index r, Eigen::Index c, RngStream& rng) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

// ---- MoE --------------------------------------------------------------------------------

TEST(Moe, SingleExpertHasUnitGate) {
  RngStream rng(1);
  ParamStore store;
  const MoeLayer moe(store, "moe", 8, 8, 1, rng);
  const MatrixXd x = random_mat(5, 8, rng);
  Tape tape;
  ForwardCtx ctx{tape};
  Tensor gate;
  const Tensor out = moe(ctx, tape.constant(to_tensor(x)), &gate).value();
  for (double g : gate.storage()) EXPECT_EQ(g, 1.0);
  EXPECT_LT((to_mat(out) - o_mlp(moe.expert(0), x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Moe, IdenticalExpertsIgnoreTheGate) {
  RngStream rng(2);
  ParamStore store;
  MoeLayer moe(store, "moe", 6, 4, 3, rng);
  for (std::size_t k = 1; k < 3; ++k)
    for (const std::string part : {".0.weight", ".0.bias", ".1.weight", ".1.bias"})
      store.find("moe.expert" + std::to_string(k) + part)->value = store.find("moe.expert0" + part)->value;
  const MatrixXd x = random_mat(7, 6, rng);
  Tape tape;
  ForwardCtx ctx{tape};
  const Tensor out = moe(ctx, tape.constant(to_tensor(x))).value();
  EXPECT_LT((to_mat(out) - o_mlp(moe.expert(0), x)).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Moe, GateRowsSumToOneAndOutputIsInTheExpertHull) {
  RngStream rng(3);
  ParamStore store;
  const MoeLayer moe(store, "moe", 8, 16, 8, rng);
  const MatrixXd x = random_mat(10, 8, rng);
  Tape tape;
  ForwardCtx ctx{tape};
  Tensor gate;
  const MatrixXd out = to_mat(moe(ctx, tape.constant(to_tensor(x)), &gate).value());
  const MatrixXd g = to_mat(gate);
  for (Eigen::Index r = 0; r < g.rows(); ++r) EXPECT_NEAR(g.row(r).sum(), 1.0, 1e-12);
  MatrixXd lo = MatrixXd::Constant(10, 8, 1e300), hi = MatrixXd::Constant(10, 8, -1e300);
  for (std::size_t k = 0; k < 8; ++k) {
    const MatrixXd e = o_mlp(moe.expert(k), x);
    lo = lo.cwiseMin(e);
    hi = hi.cwiseMax(e);
  }
  EXPECT_TRUE(((out.array() >= lo.array() - 1e-12) && (out.array() <= hi.array() + 1e-12)).all());
  EXPECT_LT((out - o_moe(moe, x)).cwiseAbs().maxCoeff(), 1e-12);
}

// ---- multistream block ----------------------------------------------------------------------

class BlockTest : public ::testing::Test {
 protected:
  BlockTest() : rng_(7), block_(store_, "blk", 16, 4, 2, 4, 16, 32, rng_) {}
  RngStream rng_;
  ParamStore store_;
  MultistreamBlock block_;
};

TEST_F(BlockTest, NoStreamsReducesToSelfAttentionBlock) {
  const MatrixXd q = random_mat(9, 16, rng_);
  Tape tape;
  ForwardCtx ctx{tape};
  const Tensor out = block_(ctx, tape.constant(to_tensor(q)), {}).value();
  EXPECT_EQ(out.shape(), (Shape{9, 16}));
  EXPECT_LT((to_mat(out) - o_self_block(block_, q)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST_F(BlockTest, MatchesTheReferenceWithTwoStreams) {
  const MatrixXd q = random_mat(6, 16, rng_), s0 = random_mat(4, 16, rng_), s1 = random_mat(11, 16, rng_);
  Tape tape;
  ForwardCtx ctx{tape};
  const Tensor out =
      block_(ctx, tape.constant(to_tensor(q)), {tape.constant(to_tensor(s0)), tape.constant(to_tensor(s1))}).value();
  EXPECT_LT((to_mat(out) - o_block(block_, q, {s0, s1})).cwiseAbs().maxCoeff(), 1e-9);
}

TEST_F(BlockTest, SingletonStreamCrossAttentionReturnsTheProjectedRow) {
  const MatrixXd q = random_mat(5, 16, rng_), mem = random_mat(1, 16, rng_);
  const auto& slot = block_.slots()[0];
  Tape tape;
  ForwardCtx ctx{tape};
  const Var qv = tape.constant(to_tensor(q));
  const Var m = slot.ln_stream(ctx, tape.constant(to_tensor(mem)));
  const MatrixXd cross = to_mat(slot.cross(ctx, slot.ln_query(ctx, qv), m, m).value());
  const MatrixXd projected = o_linear(slot.cross.out_proj(), o_linear(slot.cross.v_proj(), to_mat(m.value())));
  for (Eigen::Index r = 0; r < cross.rows(); ++r)
    for (Eigen::Index c = 0; c < cross.cols(); ++c) EXPECT_NEAR(cross(r, c), projected(0, c), 1e-12);
}

TEST_F(BlockTest, DeterministicWithoutDropout) {
  const MatrixXd q = random_mat(6, 16, rng_), s0 = random_mat(4, 16, rng_);
  Tape t1, t2;
  ForwardCtx c1{t1}, c2{t2};
  const Tensor a = block_(c1, t1.constant(to_tensor(q)), {t1.constant(to_tensor(s0))}).value();
  const Tensor b = block_(c2, t2.constant(to_tensor(q)), {t2.constant(to_tensor(s0))}).value();
  EXPECT_EQ(a.storage(), b.storage());
}

TEST_F(BlockTest, RejectsWidthMismatchAndTooManyStreams) {
  Tape tape;
  ForwardCtx ctx{tape};
  const Var q = tape.constant(Tensor({3, 16}));
  EXPECT_THROW(block_(ctx, q, {tape.constant(Tensor({2, 8}))}), ValidationError);
  const Var s = tape.constant(Tensor({2, 16}));
  EXPECT_THROW(block_(ctx, q, {s, s, s}), ValidationError);
}

// ---- decoder --------------------------------------------------------------------------------

ModelConfig small_config() {
  ModelConfig c;
  c.d = 32;
  c.expert_hidden = 32;
  c.ffn_hidden = 64;
  return c;
}

class DecoderTest : public ::testing::Test {
 protected:
  DecoderTest() : model_(small_config(), 11) {
    RngStream gen(23);
    scenarios_ = generate_synthetic(3, 0.34, gen);
    for (const auto& s : scenarios_) inputs_.push_back(build_input(s));
  }
  CdkFormer model_;
  std::vector<Scenario> scenarios_;
  std::vector<SceneInput> inputs_;
};

TEST_F(DecoderTest, DecodedQueryShapes) {
  Tape tape;
  ForwardCtx ctx{tape};
  const ModelOutput o = model_.forward(ctx, inputs_[0]);
  EXPECT_EQ(o.queries.mode.value().shape(), (Shape{6, 32}));
  EXPECT_EQ(o.queries.regular.value().shape(), (Shape{30, 32}));
  EXPECT_EQ(o.queries.tail.value().shape(), (Shape{30, 32}));
  EXPECT_EQ(o.scene_query.value().shape(), (Shape{180, 32}));
}

TEST_F(DecoderTest, TailPathNeverReadsContext) {
  Tape tape;
  ForwardCtx ctx{tape};
  EncodedScene enc = model_.encoder()(ctx, inputs_[0]);
  const DecodedQueries a = model_.decoder().decode_dual_queries(ctx, enc);
  Tensor noisy = enc.c_ctx.value();
  RngStream rng(5);
  for (auto& v : noisy.storage()) v = rng.normal() * 3.0;
  enc.c_ctx = tape.constant(noisy);
  const DecodedQueries b = model_.decoder().decode_dual_queries(ctx, enc);
  EXPECT_EQ(a.tail.value().storage(), b.tail.value().storage());
  EXPECT_NE(a.mode.value().storage(), b.mode.value().storage());
  EXPECT_NE(a.regular.value().storage(), b.regular.value().storage());
  enc.c_ctx = tape.constant(Tensor(noisy.shape()));
  const DecodedQueries z = model_.decoder().decode_dual_queries(ctx, enc);
  EXPECT_EQ(a.tail.value().storage(), z.tail.value().storage());
  EXPECT_NE(a.mode.value().storage(), z.mode.value().storage());
}

TEST_F(DecoderTest, StreamOrderMatters) {
  ModelConfig swapped = small_config();
  swapped.ablation.stream_order = StreamOrder::kContextFirst;
  CdkFormer other(swapped, 11);  // same seed: identical parameters
  Tape t1, t2;
  ForwardCtx c1{t1}, c2{t2};
  const ModelOutput a = model_.forward(c1, inputs_[1]);
  const ModelOutput b = other.forward(c2, inputs_[1]);
  EXPECT_EQ(a.enc.c_ctx.value().storage(), b.enc.c_ctx.value().storage());
  EXPECT_NE(a.queries.mode.value().storage(), b.queries.mode.value().storage());
}

TEST_F(DecoderTest, GateLimitsAndConvexity) {
  Tape tape;
  ForwardCtx ctx{tape};
  const ModelOutput o = model_.forward(ctx, inputs_[0]);
  const Var reg = o.queries.regular, tail = o.queries.tail;
  const Var zero = tape.constant(Tensor(reg.value().shape()));
  const Var one = tape.constant(Tensor::filled(reg.value().shape(), 1.0));
  EXPECT_EQ(gated_mix(reg, tail, zero).value().storage(), reg.value().storage());
  EXPECT_EQ(gated_mix(reg, tail, one).value().storage(), tail.value().storage());
  const Tensor& g = o.gamma.value();
  const Tensor& dual = o.dual.value();
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_GT(g[i], 0.0);
    EXPECT_LT(g[i], 1.0);
    EXPECT_GE(dual[i], std::min(reg.value()[i], tail.value()[i]));
    EXPECT_LE(dual[i], std::max(reg.value()[i], tail.value()[i]));
  }
}

TEST_F(DecoderTest, SceneQueryIsTheBroadcastSum) {
  Tape tape;
  ForwardCtx ctx{tape};
  const ModelOutput o = model_.forward(ctx, inputs_[0]);
  const Tensor& q = o.scene_query.value();
  const Tensor& m = o.queries.mode.value();
  const Tensor& f = o.dual.value();
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t t = 0; t < 30; ++t)
      for (std::size_t c = 0; c < 32; ++c) {
        ASSERT_EQ(q.at(k * 30 + t, c), m.at(k, c) + f.at(t, c));
      }
  const Tensor zq = DualQueryDecoder::build_scene_query(tape.constant(Tensor({6, 32})), o.dual).value();
  for (std::size_t k = 0; k < 6; ++k)
    for (std::size_t t = 0; t < 30; ++t)
      for (std::size_t c = 0; c < 32; ++c) ASSERT_EQ(zq.at(k * 30 + t, c), f.at(t, c));
}

TEST_F(DecoderTest, PredictionContract) {
  for (const auto& in : inputs_) {
    Tape tape;
    ForwardCtx ctx{tape};
    const ModelOutput o = model_.forward(ctx, in);
    EXPECT_EQ(o.scene.trajectories.value().shape(), (Shape{180, 2}));
    EXPECT_EQ(o.scene.probs.value().shape(), (Shape{1, 6}));
    double total = 0.0;
    for (double p : o.scene.probs.value().storage()) total += p;
    EXPECT_NEAR(total, 1.0, 1e-6);
    for (double v : o.scene.trajectories.value().storage()) EXPECT_TRUE(std::isfinite(v));
  }
  const PredictionSet a = model_.predict(inputs_[0]);
  const PredictionSet b = model_.predict(inputs_[1]);
  EXPECT_NE(a.trajectories[0][29], b.trajectories[0][29]);
  const PredictionSet again = model_.predict(inputs_[0]);
  EXPECT_EQ(a.trajectories, again.trajectories);
  EXPECT_EQ(a.probs, again.probs);
}

TEST_F(DecoderTest, AuxiliaryHeads) {
  Tape tape;
  ForwardCtx ctx{tape};
  const ModelOutput o = model_.forward(ctx, inputs_[0]);
  double total = 0.0;
  for (double p : o.aux.mode.probs.value().storage()) total += p;
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_EQ(o.aux.group.value().shape(), (Shape{inputs_[0].num_agents * 30, 2}));
  EXPECT_EQ(o.aux.regular.value().shape(), (Shape{30, 2}));
  EXPECT_EQ(o.aux.tail.value().shape(), (Shape{30, 2}));
  EXPECT_NE(o.aux.mode.trajectories.value().storage(), o.scene.trajectories.value().storage());
}

TEST_F(DecoderTest, AblationsDropTheirPaths) {
  for (const std::string flag : {"no-reg-q", "no-tail-q", "no-mode-q"}) {
    ModelConfig c = small_config();
    c.apply_ablation(flag);
    CdkFormer m(c, 3);
    Tape tape;
    ForwardCtx ctx{tape};
    const ModelOutput o = m.forward(ctx, inputs_[0]);
    EXPECT_EQ(o.gamma.valid(), flag == "no-mode-q") << flag;
    if (flag == "no-reg-q") EXPECT_EQ(o.dual.value().storage(), o.queries.tail.value().storage());
    if (flag == "no-tail-q") EXPECT_EQ(o.dual.value().storage(), o.queries.regular.value().storage());
    if (flag == "no-mode-q") EXPECT_FALSE(o.aux.mode.probs.valid());
  }
  ModelConfig c = small_config();
  c.apply_ablation("no-reg-q");
  EXPECT_THROW(c.apply_ablation("no-tail-q"), ValidationError);
  EXPECT_THROW(c.apply_ablation("layers=7"), ValidationError);
  EXPECT_THROW(c.apply_ablation("bogus"), ValidationError);
}

TEST(ModelGradients, TinyModelEndToEnd) {
  ModelConfig c;
  c.horizon = {5, 3, 10.0};
  c.d = 8;
  c.heads = 2;
  c.layers = 1;
  c.modes = 2;
  c.experts = 2;
  c.expert_hidden = 8;
  c.ffn_hidden = 8;
  c.fourier_bands = 1;
  CdkFormer model(c, 1);
  RngStream gen(4);
  GeneratorConfig g;
  g.horizon = c.horizon;
  g.min_neighbors = g.max_neighbors = 1;
  g.polyline_points = 3;
  const SceneInput in = build_input(generate_synthetic(1, 1.0, gen, g)[0]);
  RngStream wr(8);
  auto weights = [&](std::size_t n) {
    Tensor t({n});
    for (auto& v : t.storage()) v = wr.normal();
    return t;
  };
  const Tensor w_traj = weights(12), w_prob = weights(2), w_mode = weights(12), w_group = weights(12);
  std::vector<Tensor*> targets;
  for (auto& p : model.params()) targets.push_back(&p.value);
  const auto f = [&](Tape& tape) {
    ForwardCtx ctx{tape};
    const ModelOutput o = model.forward(ctx, in);
    auto dot = [&](Var v, const Tensor& w) { return sum_all(mul(reshape(v, {w.size()}), tape.constant(w))); };
    return add(add(dot(o.scene.trajectories, w_traj), dot(o.scene.probs, w_prob)),
               add(add(dot(o.aux.mode.trajectories, w_mode), dot(o.aux.group, w_group)),
                   add(sum_all(o.aux.regular), sum_all(o.aux.tail))));
  };
  GradCheckOptions o;
  o.max_coords = 500;
  EXPECT_LT(grad_check(f, targets, o).max_rel_error, 1e-3);
}

}  // namespace
}  // namespace cdk
