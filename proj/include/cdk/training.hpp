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

#ifndef CDK_TRAINING_HPP_
#define CDK_TRAINING_HPP_

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cdk/model.hpp"
#include "cdk/tail.hpp"

namespace cdk {

/// Loss terms of one scenario or a batch mean. `future_t_raw` is the tail-head
/// regression before the S_tilde weight; `future_t` is after it.
struct LossBreakdown {
  double mode = 0.0, future_r = 0.0, future_t_raw = 0.0, future_t = 0.0, scene = 0.0, group = 0.0, total = 0.0;

  LossBreakdown& operator+=(const LossBreakdown& o);
  LossBreakdown scaled(double s) const;
  static const std::vector<std::string>& column_names();
  std::vector<double> values() const;
};

struct LossResult {
  LossBreakdown terms;
  Var total;
  std::size_t mode_winner = 0, scene_winner = 0;
};

/// Index of the candidate with the smallest final displacement error; ties go
/// to the lowest index. `traj` holds K blocks of T_f rows.
std::size_t winner_by_fde(const Tensor& traj, const Tensor& gt, std::size_t modes);

/// total = L_mode + L_future_r + alpha * s_tilde * L_future_t_raw + L_scene + L_group.
LossResult compute_loss(const ModelOutput& out, const SceneInput& in, double s_tilde, double alpha);

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double lr = 3e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double clip_norm = 5.0;  // 0 disables clipping
  double alpha = 0.1;
  bool tail_weighting = true;  // false trains with S_tilde == 1
  std::string schedule = "cosine";  // cosine | constant
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// Per-step learning rate: base * (1 + cos(pi * step / total)) / 2 for the
/// cosine schedule.
double scheduled_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps);

/// Adam with decoupled weight decay over a flat parameter vector.
class AdamW {
 public:
  AdamW(std::size_t size, const TrainConfig& config);
  void step(ParamStore& params, const std::vector<double>& grad, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  TrainConfig config_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Loss of every scenario with dropout off; no gradient.
LossBreakdown evaluate_loss(const CdkFormer& model, const SceneInput& in, double s_tilde, double alpha);

/**
 * Batch-mean gradient into `grad` (resized to the parameter count).
 *
 * Dropout noise for scenario i is keyed by (dropout_key, index[i]), so the
 * result does not depend on `threads`. Per-scenario gradients are summed in
 * batch order.
 */
LossBreakdown batch_gradient(const CdkFormer& model, const std::vector<const SceneInput*>& batch,
                             const std::vector<double>& s_tilde, const std::vector<std::size_t>& index,
                             const TrainConfig& config, std::uint64_t dropout_key, std::vector<double>& grad);

/// Rescales `grad` to global L2 norm `max_norm` when above it; returns the pre-clip norm.
double clip_global_norm(std::vector<double>& grad, double max_norm);

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0.0;        // at the epoch's first step
  LossBreakdown loss;     // mean over the epoch's scenarios
  double seconds = 0.0;
};

struct TrainOptions {
  std::filesystem::path out_dir;  // empty writes nothing
  Provenance provenance;
  std::function<void(const EpochMetrics&)> on_epoch;
};

/**
 * Trains in place. Writes `checkpoint.ckpt` after every epoch, `final.ckpt`
 * at the end, `metrics.csv` and a `metrics.timing.csv` wall-time sidecar.
 * Throws TrainingDiverged naming the epoch, batch and scenario on a
 * non-finite loss or gradient.
 */
std::vector<EpochMetrics> train(CdkFormer& model, const std::vector<SceneInput>& inputs,
                                const std::vector<double>& s_tilde, const TrainConfig& config,
                                const TrainOptions& options = {});

/// S_tilde per scenario in corpus order, looked up by id.
std::vector<double> align_weights(const std::vector<Scenario>& corpus, const std::vector<TailScore>& scores);

}  // namespace cdk

#endif  // CDK_TRAINING_HPP_
