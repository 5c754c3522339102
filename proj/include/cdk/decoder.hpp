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

#ifndef CDK_DECODER_HPP_
#define CDK_DECODER_HPP_

#include <vector>

#include "cdk/encoder.hpp"
#include "cdk/layers.hpp"
#include "cdk/model_config.hpp"

namespace cdk {

/// Learnable queries: mode (K x d), regular and tail future (T_f x d).
struct QuerySet {
  Parameter* mode = nullptr;
  Parameter* regular = nullptr;
  Parameter* tail = nullptr;
};

struct DecodedQueries {
  Var mode;     // K x d
  Var regular;  // T_f x d, invalid when the regular query is ablated
  Var tail;     // T_f x d, invalid when the tail query is ablated
};

/// K trajectories (rows k*T_f + t, meters) and a 1 x K probability row.
struct MultimodalHead {
  Var trajectories;
  Var probs;
};

struct AuxiliaryOutputs {
  MultimodalHead mode;  // invalid Vars when the mode query is ablated
  Var regular;          // T_f x 2
  Var tail;             // T_f x 2
  Var group;            // (N_a*T_f) x 2, absolute positions
};

class DualQueryDecoder {
 public:
  DualQueryDecoder() = default;
  DualQueryDecoder(ParamStore& store, const ModelConfig& config, RngStream& rng);

  const QuerySet& queries() const { return queries_; }

  /// Streams in the configured order: deviation then context by default.
  std::vector<Var> context_streams(const EncodedScene& enc) const;
  DecodedQueries decode_dual_queries(const ForwardCtx& ctx, const EncodedScene& enc) const;
  /// gamma = sigmoid(MLP([regular || tail])); dual = gamma*tail + (1-gamma)*regular.
  /// With one query ablated the other is returned unchanged and gamma is invalid.
  std::pair<Var, Var> combine_queries(const ForwardCtx& ctx, Var regular, Var tail) const;
  Var router_gamma(const ForwardCtx& ctx, Var regular, Var tail) const;
  /// Q[k*T_f + t] = mode[k] + dual[t].
  static Var build_scene_query(Var mode, Var dual);
  MultimodalHead refine_and_predict(const ForwardCtx& ctx, Var scene_query, const EncodedScene& enc) const;
  AuxiliaryOutputs auxiliary_heads(const ForwardCtx& ctx, const DecodedQueries& q, Var c_ctx,
                                   const SceneInput& in) const;

  const std::vector<MultistreamBlock>& mode_blocks() const { return mode_blocks_; }

 private:
  Var time_attention(const ForwardCtx& ctx, const EncoderLayer& layer, Var q) const;
  Var modality_attention(const ForwardCtx& ctx, const EncoderLayer& layer, Var q) const;
  Var increments_to_positions(Var increments, std::size_t steps) const;

  ModelConfig config_;
  QuerySet queries_;
  std::vector<MultistreamBlock> mode_blocks_, regular_blocks_, tail_blocks_;
  Mlp router_;
  EncoderLayer time_1_, modality_1_, time_2_, modality_2_;
  MultistreamBlock refine_;
  Mlp traj_head_, score_head_;
  Mlp mode_traj_head_, mode_score_head_;
  Mlp regular_head_, tail_head_;
  Mlp group_head_;
};

}  // namespace cdk

#endif  // CDK_DECODER_HPP_
