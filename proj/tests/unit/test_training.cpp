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
#include <fstream>
#include <iterator>

#include "cdk/training.hpp"

namespace cdk {
namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("cdk_training_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ModelConfig tiny_config() {
  ModelConfig c;
  c.d = 16;
  c.heads = 2;
  c.layers = 1;
  c.experts = 2;
  c.expert_hidden = 16;
  c.ffn_hidden = 16;
  c.fourier_bands = 2;
  return c;
}

std::vector<SceneInput> make_inputs(std::size_t n, std::uint64_t seed) {
  RngStream gen(seed);
  std::vector<SceneInput> out;
  for (const auto& s : generate_synthetic(n, 0.5, gen)) out.push_back(build_input(s));
  return out;
}

// Hand-built head outputs on a tape: candidate `winner` equals the ground
// truth, every other candidate is offset by `miss` metres.
class LossTest : public ::testing::Test {
 protected:
  static constexpr std::size_t kModes = 6, kWinner = 2;

  LossTest() : in_(make_inputs(1, 3)[0]) {}

  Tensor candidates(double miss) const {
    const std::size_t tf = in_.t_fut;
    Tensor t({kModes * tf, 2});
    for (std::size_t k = 0; k < kModes; ++k)
      for (std::size_t s = 0; s < tf; ++s)
        for (std::size_t c = 0; c < 2; ++c)
          t.at(k * tf + s, c) = in_.future.at(s, c) + (k == kWinner ? 0.0 : miss * static_cast<double>(k + 1));
    return t;
  }

  Tensor onehot() const {
    Tensor p({1, kModes});
    p[kWinner] = 1.0;
    return p;
  }

  ModelOutput perfect(Tape& tape, double tail_error = 0.0) const {
    ModelOutput o;
    o.scene = {tape.constant(candidates(1.0)), tape.constant(onehot())};
    o.aux.mode = {tape.constant(candidates(2.0)), tape.constant(onehot())};
    o.aux.regular = tape.constant(in_.future);
    Tensor tail = in_.future;
    for (auto& v : tail.storage()) v += tail_error;
    o.aux.tail = tape.constant(tail);
    Tensor group({in_.num_agents * in_.t_fut, 2});
    for (std::size_t a = 0; a < in_.num_agents; ++a)
      for (std::size_t s = 0; s < in_.t_fut; ++s)
        for (std::size_t c = 0; c < 2; ++c)
          group.at(a * in_.t_fut + s, c) =
              in_.neighbor_valid[a] ? in_.neighbor_future.at(a * in_.t_fut + s, c) : 1e3;  // invalid rows are ignored
    o.aux.group = tape.constant(group);
    return o;
  }

  SceneInput in_;
};

TEST_F(LossTest, PerfectPredictionsGiveZeroLoss) {
  Tape tape;
  const LossResult r = compute_loss(perfect(tape), in_, 1.7, 0.1);
  for (double v : r.terms.values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(r.scene_winner, kWinner);
  EXPECT_EQ(r.mode_winner, kWinner);
}

TEST_F(LossTest, ZeroWeightRemovesTheTailTerm) {
  Tape tape;
  const LossResult r = compute_loss(perfect(tape, 4.0), in_, 0.0, 0.1);
  EXPECT_GT(r.terms.future_t_raw, 0.0);
  EXPECT_EQ(r.terms.future_t, 0.0);
  EXPECT_EQ(r.terms.total, 0.0);
}

TEST_F(LossTest, DoublingTheWeightDoublesOnlyTheTailTerm) {
  Tape tape;
  const ModelOutput o = perfect(tape, 0.3);
  const LossBreakdown a = compute_loss(o, in_, 0.8, 0.1).terms;
  const LossBreakdown b = compute_loss(o, in_, 1.6, 0.1).terms;
  EXPECT_DOUBLE_EQ(b.future_t, 2.0 * a.future_t);
  EXPECT_EQ(a.mode, b.mode);
  EXPECT_EQ(a.future_r, b.future_r);
  EXPECT_EQ(a.future_t_raw, b.future_t_raw);
  EXPECT_EQ(a.scene, b.scene);
  EXPECT_EQ(a.group, b.group);
}

TEST_F(LossTest, NonWinnerPerturbationLeavesTheLossUnchanged) {
  Tape tape;
  ModelOutput o = perfect(tape);
  Tensor scene = candidates(1.0);
  for (auto& v : scene.storage()) v += 0.05;  // every candidate off the ground truth
  o.scene.trajectories = tape.constant(scene);
  const LossResult base = compute_loss(o, in_, 1.0, 0.1);
  ASSERT_EQ(base.scene_winner, kWinner);
  const std::size_t tf = in_.t_fut;
  for (std::size_t k = 0; k < kModes; ++k) {
    if (k == kWinner) continue;
    for (std::size_t s = 0; s < tf; ++s) scene.at(k * tf + s, 0) += 3.0 + static_cast<double>(s);
  }
  o.scene.trajectories = tape.constant(scene);
  const LossResult moved = compute_loss(o, in_, 1.0, 0.1);
  EXPECT_EQ(moved.scene_winner, kWinner);
  EXPECT_EQ(moved.terms.values(), base.terms.values());
}

TEST_F(LossTest, WinnerIsChosenByFinalDisplacement) {
  const std::size_t tf = 4;
  Tensor gt({tf, 2}), traj({2 * tf, 2});
  for (std::size_t s = 0; s < tf; ++s) gt.at(s, 0) = static_cast<double>(s);
  for (std::size_t s = 0; s < tf; ++s) {
    traj.at(s, 0) = gt.at(s, 0);       // candidate 0: exact except the endpoint
    traj.at(tf + s, 0) = gt.at(s, 0) + 1.0;  // candidate 1: 1 m off everywhere
  }
  traj.at(tf - 1, 1) = 1.5;
  EXPECT_EQ(winner_by_fde(traj, gt, 2), 1u);  // ADE would choose 0
}

TEST_F(LossTest, TotalDecomposesForRealOutputs) {
  CdkFormer model(tiny_config(), 4);
  Tape tape;
  ForwardCtx ctx{tape};
  const double alpha = 0.37, w = 1.9;
  const LossBreakdown t = compute_loss(model.forward(ctx, in_), in_, w, alpha).terms;
  EXPECT_NEAR(t.total, t.mode + t.future_r + alpha * t.future_t + t.scene + t.group, 1e-9);
  EXPECT_NEAR(t.future_t, w * t.future_t_raw, 1e-12);
  for (double v : t.values()) EXPECT_GE(v, 0.0);
  EXPECT_GT(t.group, 0.0);
}

TEST_F(LossTest, RejectsMissingGroundTruthAndNegativeWeights) {
  Tape tape;
  const ModelOutput o = perfect(tape);
  SceneInput no_future = in_;
  no_future.future = Tensor();
  EXPECT_THROW(compute_loss(o, no_future, 1.0, 0.1), ValidationError);
  EXPECT_THROW(compute_loss(o, in_, -1.0, 0.1), ValidationError);
  EXPECT_THROW(compute_loss(o, in_, 1.0, -0.1), ValidationError);
}

// ---- optimizer and schedule ---------------------------------------------------------------

TEST(Schedule, CosineFromBaseToZero) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0, 100), 3e-3);
  EXPECT_NEAR(scheduled_lr(c, 50, 100), 1.5e-3, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 100, 100), 0.0, 1e-18);
  for (std::size_t s = 1; s <= 100; ++s) EXPECT_LT(scheduled_lr(c, s, 100), scheduled_lr(c, s - 1, 100));
  c.schedule = "constant";
  EXPECT_EQ(scheduled_lr(c, 70, 100), 3e-3);
}

TEST(AdamWTest, FirstStepMatchesTheClosedForm) {
  ParamStore store;
  Parameter& p = store.add("w", {3});
  p.value.storage() = {1.0, -2.0, 0.5};
  TrainConfig c;
  AdamW opt(3, c);
  const std::vector<double> g{0.3, -4.0, 0.0};
  const double lr = 0.01;
  opt.step(store, g, lr);
  const std::vector<double> w0{1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    // Bias-corrected moments equal g and g^2 after one step.
    const double expect = w0[i] * (1.0 - lr * c.weight_decay) - lr * g[i] / (std::abs(g[i]) + c.eps);
    EXPECT_NEAR(p.value[i], expect, 1e-15);
  }
}

TEST(ClipTest, ScalesToTheMaximumNorm) {
  std::vector<double> g{3.0, 4.0, 12.0};
  EXPECT_DOUBLE_EQ(clip_global_norm(g, 5.0), 13.0);
  EXPECT_NEAR(std::hypot(g[0], g[1], g[2]), 5.0, 1e-12);
  std::vector<double> small{0.1, 0.2};
  clip_global_norm(small, 5.0);
  EXPECT_EQ(small, (std::vector<double>{0.1, 0.2}));
}

TEST(TrainStep, SmallStepDecreasesTheLoss) {
  ModelConfig mc = tiny_config();
  mc.dropout = 0.0;
  CdkFormer model(mc, 9);
  const SceneInput in = make_inputs(1, 12)[0];
  TrainConfig tc;
  const double before = evaluate_loss(model, in, 1.3, tc.alpha).total;
  std::vector<double> grad;
  const LossBreakdown at = batch_gradient(model, {&in}, {1.3}, {0}, tc, 0, grad);
  EXPECT_EQ(at.total, before);
  AdamW opt(model.params().total_size(), tc);
  opt.step(model.params(), grad, 1e-5);
  EXPECT_LT(evaluate_loss(model, in, 1.3, tc.alpha).total, before);
}

TEST(TrainStep, BatchGradientIsTheMeanOfScenarioGradients) {
  ModelConfig mc = tiny_config();
  mc.dropout = 0.0;
  CdkFormer model(mc, 9);
  const auto inputs = make_inputs(2, 13);
  TrainConfig tc;
  std::vector<double> g0, g1, both;
  batch_gradient(model, {&inputs[0]}, {1.0}, {0}, tc, 0, g0);
  batch_gradient(model, {&inputs[1]}, {1.0}, {1}, tc, 0, g1);
  batch_gradient(model, {&inputs[0], &inputs[1]}, {1.0, 1.0}, {0, 1}, tc, 0, both);
  for (std::size_t i = 0; i < both.size(); ++i) ASSERT_NEAR(both[i], 0.5 * (g0[i] + g1[i]), 1e-12);
  tc.threads = 2;
  std::vector<double> threaded;
  batch_gradient(model, {&inputs[0], &inputs[1]}, {1.0, 1.0}, {0, 1}, tc, 0, threaded);
  EXPECT_EQ(threaded, both);
}

// ---- training loop ----------------------------------------------------------------------

class TrainLoopTest : public ::testing::Test {
 protected:
  TrainLoopTest() : inputs_(make_inputs(6, 21)), weights_{0.5, 1.0, 1.5, 0.7, 1.2, 1.1} {
    config_.epochs = 3;
    config_.batch_size = 4;
    config_.seed = 5;
  }
  std::vector<SceneInput> inputs_;
  std::vector<double> weights_;
  TrainConfig config_;
};

TEST_F(TrainLoopTest, SameSeedGivesIdenticalArtifacts) {
  std::string first_ckpt, first_log;
  for (int run = 0; run < 3; ++run) {
    CdkFormer model(tiny_config(), 2);
    TrainConfig c = config_;
    c.threads = run == 2 ? 2 : 1;
    TrainOptions o;
    o.out_dir = fresh_dir("det" + std::to_string(run));
    o.provenance.seed = 5;
    const auto history = train(model, inputs_, weights_, c, o);
    ASSERT_EQ(history.size(), 3u);
    EXPECT_LT(history.back().lr, history.front().lr);
    const std::string ckpt = slurp(o.out_dir / "final.ckpt"), log = slurp(o.out_dir / "metrics.csv");
    EXPECT_TRUE(fs::exists(o.out_dir / "checkpoint.ckpt"));
    EXPECT_TRUE(fs::exists(o.out_dir / "metrics.timing.csv"));
    if (run == 0) {
      first_ckpt = ckpt;
      first_log = log;
    } else {
      EXPECT_EQ(ckpt, first_ckpt) << "run " << run;
      EXPECT_EQ(log, first_log) << "run " << run;
    }
  }
}

TEST_F(TrainLoopTest, DifferentSeedsDiffer) {
  CdkFormer a(tiny_config(), 2), b(tiny_config(), 2);
  TrainConfig c = config_;
  c.epochs = 1;
  train(a, inputs_, weights_, c);
  c.seed = 6;
  train(b, inputs_, weights_, c);
  EXPECT_NE(a.params()[0].value.storage(), b.params()[0].value.storage());
}

TEST_F(TrainLoopTest, NonFiniteParametersAbortWithTheBatch) {
  CdkFormer model(tiny_config(), 2);
  model.params()[0].value[0] = std::nan("");
  try {
    train(model, inputs_, weights_, config_);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 0"), std::string::npos) << e.what();
  }
}

TEST_F(TrainLoopTest, RejectsBadInputs) {
  CdkFormer model(tiny_config(), 2);
  EXPECT_THROW(train(model, {}, {}, config_), ValidationError);
  EXPECT_THROW(train(model, inputs_, {1.0}, config_), ValidationError);
  TrainConfig bad = config_;
  bad.alpha = -1.0;
  EXPECT_THROW(train(model, inputs_, weights_, bad), ValidationError);
}

TEST(AlignWeights, LooksUpByIdAndRejectsGaps) {
  RngStream gen(1);
  const auto corpus = generate_synthetic(3, 0.0, gen);
  std::vector<TailScore> scores(3);
  for (std::size_t i = 0; i < 3; ++i) {
    scores[2 - i].id = corpus[i].id;
    scores[2 - i].s_tilde = 1.0 + static_cast<double>(i);
  }
  EXPECT_EQ(align_weights(corpus, scores), (std::vector<double>{1.0, 2.0, 3.0}));
  scores.pop_back();
  EXPECT_THROW(align_weights(corpus, scores), ValidationError);
}

// ---- checkpoints ------------------------------------------------------------------------

TEST(Checkpoint, RoundTripPreservesPredictions) {
  ModelConfig mc = tiny_config();
  mc.apply_ablation("no-grp");
  CdkFormer model(mc, 31);
  model.params()[3].value[0] = 0.123456789012345678;
  const fs::path dir = fresh_dir("ckpt");
  Provenance prov;
  prov.seed = 31;
  save_checkpoint(dir / "m.ckpt", model, prov, {{"epoch", 4}});
  nlohmann::json meta;
  const auto loaded = load_checkpoint(dir / "m.ckpt", &meta);
  EXPECT_EQ(meta.at("epoch"), 4);
  EXPECT_EQ(loaded->config().to_json(), model.config().to_json());
  for (std::size_t i = 0; i < model.params().count(); ++i)
    ASSERT_EQ(loaded->params()[i].value.storage(), model.params()[i].value.storage());
  const SceneInput in = make_inputs(1, 8)[0];
  EXPECT_EQ(loaded->predict(in).trajectories, model.predict(in).trajectories);

  const std::string bytes = slurp(dir / "m.ckpt");
  std::ofstream(dir / "short.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 8);
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), ValidationError);
  std::ofstream(dir / "junk.ckpt", std::ios::binary) << "not a checkpoint\n";
  EXPECT_THROW(load_checkpoint(dir / "junk.ckpt"), ValidationError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), ValidationError);
}

TEST(Predictions, DumpRoundTrips) {
  CdkFormer model(tiny_config(), 3);
  std::vector<PredictionSet> preds;
  for (const auto& in : make_inputs(2, 40)) preds.push_back(model.predict(in));
  const fs::path dir = fresh_dir("preds");
  write_predictions(dir / "p.jsonl", preds, Provenance{});
  const auto back = read_predictions(dir / "p.jsonl");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].id, preds[i].id);
    EXPECT_EQ(back[i].probs, preds[i].probs);
    EXPECT_EQ(back[i].trajectories, preds[i].trajectories);
  }
}

}  // namespace
}  // namespace cdk
