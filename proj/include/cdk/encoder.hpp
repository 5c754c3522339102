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

#ifndef CDK_ENCODER_HPP_
#define CDK_ENCODER_HPP_

#include <cstdint>
#include <vector>

#include "cdk/layers.hpp"
#include "cdk/model_config.hpp"
#include "cdk/scene.hpp"

namespace cdk {

/// Model-ready tensors for one scenario, all in the target-centric frame.
struct SceneInput {
  std::string id;
  std::size_t num_agents = 0;
  std::size_t target = 0;
  std::size_t t_obs = 0, t_fut = 0;
  Tensor agents;                       // (N_a*T_o) x 6: position, displacement, |displacement|, speed
  std::vector<std::uint8_t> agent_mask;  // N_a*T_o
  Tensor map_points;                   // (sum of l_m) x 4: position, displacement
  std::vector<std::size_t> map_offsets;  // N_m + 1 row offsets into map_points
  Tensor centers;                      // (N_a+N_m) x 2: agent last positions, polyline centroids
  Tensor dev_individual;               // T_o x 6
  Tensor dev_group;                    // T_o x 2
  Tensor agent_last;                   // N_a x 2
  Tensor future;                       // T_f x 2, empty without ground truth
  Tensor neighbor_future;              // (N_a*T_f) x 2, zero rows where invalid
  std::vector<std::uint8_t> neighbor_valid;  // N_a; target is never valid here
  // Frame: normalized = R(angle) * world + shift.
  double angle = 0.0;
  Vec2 shift;

  std::size_t num_polylines() const { return map_offsets.empty() ? 0 : map_offsets.size() - 1; }
  /// Maps a normalized-frame point back to the scenario's frame.
  Vec2 to_world(Vec2 p) const;
};

SceneInput build_input(const Scenario& s);

/// Applies the layout's per-column scaling and a Fourier embedding, keeping the
/// scaled raw values alongside the sin/cos features.
Tensor embed_features(const Tensor& x, const std::vector<double>& scale, std::size_t bands);

struct EncodedScene {
  Var c_ctx;  // (N_a+N_m) x d
  Var c_dev;  // T_o x d
  Var c_a;    // N_a x d
  Var x_tgt;  // T_o x d
};

class SceneEncoder {
 public:
  SceneEncoder() = default;
  SceneEncoder(ParamStore& store, const ModelConfig& config, RngStream& rng);

  /// Returns (C_a, X_tgt).
  std::pair<Var, Var> encode_agents(const ForwardCtx& ctx, const SceneInput& in) const;
  Var encode_map(const ForwardCtx& ctx, const SceneInput& in) const;
  Var fuse_scene_context(const ForwardCtx& ctx, Var c_a, Var c_m, const Tensor& centers) const;
  Var fuse_deviation(const ForwardCtx& ctx, const Tensor& individual, const Tensor& group,
                     Var x_tgt) const;
  EncodedScene operator()(const ForwardCtx& ctx, const SceneInput& in) const;

 private:
  ModelConfig config_;
  std::vector<double> agent_scale_, map_scale_, center_scale_;
  Mlp motion_embed_;
  Parameter* time_embed_ = nullptr;  // T_o x d
  std::vector<EncoderLayer> temporal_;
  Mlp point_embed_;
  std::vector<Mlp> polyline_rounds_;
  Mlp spatial_embed_;
  std::vector<EncoderLayer> fusion_;
  Mlp dev_individual_, dev_group_, dev_fuser_;
  EncoderLayer dev_layer_;
};

}  // namespace cdk

#endif  // CDK_ENCODER_HPP_
