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

#include "cdk/decoder.hpp"

namespace cdk {

namespace {

std::vector<MultistreamBlock> make_blocks(ParamStore& store, const std::string& name, const ModelConfig& c,
                                          std::size_t slots, RngStream& rng) {
  std::vector<MultistreamBlock> out;
  for (std::size_t l = 0; l < c.layers; ++l)
    out.emplace_back(store, name + "." + std::to_string(l), c.d, c.heads, slots, c.experts, c.expert_hidden,
                     c.ffn_hidden, rng);
  return out;
}

Var run_blocks(const ForwardCtx& ctx, const std::vector<MultistreamBlock>& blocks, Var q,
               const std::vector<Var>& streams) {
  for (const auto& b : blocks) q = b(ctx, q, streams);
  return q;
}

}  // namespace

DualQueryDecoder::DualQueryDecoder(ParamStore& store, const ModelConfig& config, RngStream& rng)
    : config_(config) {
  config.validate();
  const std::size_t d = config.d, tf = config.horizon.t_fut, k = config.modes;
  queries_.mode = &store.add_normal("dec.query.mode", {k, d}, 1.0, rng);
  queries_.regular = &store.add_normal("dec.query.regular", {tf, d}, 1.0, rng);
  queries_.tail = &store.add_normal("dec.query.tail", {tf, d}, 1.0, rng);
  if (config.ablation.mode_query) mode_blocks_ = make_blocks(store, "dec.mode", config, 2, rng);
  if (config.ablation.regular_query) regular_blocks_ = make_blocks(store, "dec.regular", config, 2, rng);
  if (config.ablation.tail_query) tail_blocks_ = make_blocks(store, "dec.tail", config, 1, rng);
  if (config.ablation.regular_query && config.ablation.tail_query)
    router_ = Mlp(store, "dec.router", {2 * d, d, d}, rng);
  time_1_ = EncoderLayer(store, "dec.refine.time.0", d, config.heads, config.ffn_hidden, rng);
  modality_1_ = EncoderLayer(store, "dec.refine.modality.0", d, config.heads, config.ffn_hidden, rng);
  refine_ = MultistreamBlock(store, "dec.refine.block", d, config.heads, 2, config.experts, config.expert_hidden,
                             config.ffn_hidden, rng);
  time_2_ = EncoderLayer(store, "dec.refine.time.1", d, config.heads, config.ffn_hidden, rng);
  modality_2_ = EncoderLayer(store, "dec.refine.modality.1", d, config.heads, config.ffn_hidden, rng);
  traj_head_ = Mlp(store, "dec.head.trajectory", {d, d, 2}, rng);
  score_head_ = Mlp(store, "dec.head.score", {d, d, 1}, rng);
  if (config.ablation.mode_query) {
    mode_traj_head_ = Mlp(store, "dec.aux.mode.trajectory", {d, d, 2 * tf}, rng);
    mode_score_head_ = Mlp(store, "dec.aux.mode.score", {d, d, 1}, rng);
  }
  if (config.ablation.regular_query) regular_head_ = Mlp(store, "dec.aux.regular", {d, d, 2}, rng);
  if (config.ablation.tail_query) tail_head_ = Mlp(store, "dec.aux.tail", {d, d, 2}, rng);
  group_head_ = Mlp(store, "dec.aux.group", {d, d, 2 * tf}, rng);
}

std::vector<Var> DualQueryDecoder::context_streams(const EncodedScene& enc) const {
  if (config_.ablation.stream_order == StreamOrder::kDeviationFirst) return {enc.c_dev, enc.c_ctx};
  return {enc.c_ctx, enc.c_dev};
}

DecodedQueries DualQueryDecoder::decode_dual_queries(const ForwardCtx& ctx, const EncodedScene& enc) const {
  const auto streams = context_streams(enc);
  DecodedQueries q;
  q.mode = ctx.p(*queries_.mode);
  if (config_.ablation.mode_query) q.mode = run_blocks(ctx, mode_blocks_, q.mode, streams);
  if (config_.ablation.regular_query) q.regular = run_blocks(ctx, regular_blocks_, ctx.p(*queries_.regular), streams);
  if (config_.ablation.tail_query) q.tail = run_blocks(ctx, tail_blocks_, ctx.p(*queries_.tail), {enc.c_dev});
  return q;
}

Var DualQueryDecoder::router_gamma(const ForwardCtx& ctx, Var regular, Var tail) const {
  return sigmoid(router_(ctx, concat_cols({regular, tail})));
}

std::pair<Var, Var> DualQueryDecoder::combine_queries(const ForwardCtx& ctx, Var regular, Var tail) const {
  if (!regular.valid()) return {tail, Var()};
  if (!tail.valid()) return {regular, Var()};
  const Var gamma = router_gamma(ctx, regular, tail);
  return {gated_mix(regular, tail, gamma), gamma};
}

Var DualQueryDecoder::build_scene_query(Var mode, Var dual) { return broadcast_add_modes(mode, dual); }

Var DualQueryDecoder::time_attention(const ForwardCtx& ctx, const EncoderLayer& layer, Var q) const {
  return layer(ctx, q, config_.modes);  // rows k*T_f + t: one group per mode
}

Var DualQueryDecoder::modality_attention(const ForwardCtx& ctx, const EncoderLayer& layer, Var q) const {
  const std::size_t k = config_.modes, tf = config_.horizon.t_fut;
  std::vector<std::size_t> to_time(k * tf), back(k * tf);
  for (std::size_t t = 0; t < tf; ++t)
    for (std::size_t m = 0; m < k; ++m) {
      to_time[t * k + m] = m * tf + t;
      back[m * tf + t] = t * k + m;
    }
  return gather_rows(layer(ctx, gather_rows(q, to_time), tf), back);
}

Var DualQueryDecoder::increments_to_positions(Var increments, std::size_t steps) const {
  return cumsum_blocks(reshape(increments, {increments.value().size() / 2, 2}), steps);
}

MultimodalHead DualQueryDecoder::refine_and_predict(const ForwardCtx& ctx, Var q, const EncodedScene& enc) const {
  const std::size_t k = config_.modes, tf = config_.horizon.t_fut;
  if (q.rows() != k * tf || q.cols() != config_.d) throw ValidationError("refine_and_predict: scene query must be (K*T_f) x d");
  q = modality_attention(ctx, modality_1_, time_attention(ctx, time_1_, q));
  q = refine_(ctx, q, context_streams(enc));
  q = modality_attention(ctx, modality_2_, time_attention(ctx, time_2_, q));
  MultimodalHead out;
  out.trajectories = increments_to_positions(traj_head_(ctx, q), tf);
  std::vector<std::size_t> offsets(k + 1);
  for (std::size_t m = 0; m <= k; ++m) offsets[m] = m * tf;
  const Var logits = score_head_(ctx, segment_mean(q, offsets));
  out.probs = softmax_rows(reshape(logits, {1, k}));
  return out;
}

AuxiliaryOutputs DualQueryDecoder::auxiliary_heads(const ForwardCtx& ctx, const DecodedQueries& q, Var c_ctx,
                                                   const SceneInput& in) const {
  const std::size_t k = config_.modes, tf = config_.horizon.t_fut, na = in.num_agents;
  AuxiliaryOutputs out;
  if (config_.ablation.mode_query) {
    out.mode.trajectories = increments_to_positions(mode_traj_head_(ctx, q.mode), tf);
    out.mode.probs = softmax_rows(reshape(mode_score_head_(ctx, q.mode), {1, k}));
  }
  if (q.regular.valid()) out.regular = increments_to_positions(regular_head_(ctx, q.regular), tf);
  if (q.tail.valid()) out.tail = increments_to_positions(tail_head_(ctx, q.tail), tf);
  const Var rel = increments_to_positions(group_head_(ctx, slice_rows(c_ctx, 0, na)), tf);
  Tensor origin({na * tf, 2});
  for (std::size_t a = 0; a < na; ++a)
    for (std::size_t t = 0; t < tf; ++t) {
      origin.at(a * tf + t, 0) = in.agent_last.at(a, 0);
      origin.at(a * tf + t, 1) = in.agent_last.at(a, 1);
    }
  out.group = add(rel, ctx.tape.constant(std::move(origin)));
  return out;
}

}  // namespace cdk
