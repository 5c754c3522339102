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

#include "cdk/encoder.hpp"

#include <cmath>

#include "cdk/deviation.hpp"

namespace cdk {

Vec2 SceneInput::to_world(Vec2 p) const {
  const double c = std::cos(angle), s = std::sin(angle);
  const double x = p.x - shift.x, y = p.y - shift.y;
  return {c * x + s * y, -s * x + c * y};
}

SceneInput build_input(const Scenario& raw) {
  validate(raw);
  const RigidTransform tf = normalizing_transform(raw);
  const Scenario s = transform_scenario(raw, tf.angle, tf.shift);
  SceneInput in;
  in.id = s.id;
  in.angle = tf.angle;
  in.shift = tf.shift;
  in.num_agents = s.agents.size();
  in.target = s.target_index();
  in.t_obs = s.horizon.t_obs;
  in.t_fut = s.horizon.t_fut;
  const std::size_t na = in.num_agents, to = in.t_obs, tf_len = in.t_fut;

  in.agents = Tensor({na * to, 6});
  in.agent_mask.resize(na * to);
  in.agent_last = Tensor({na, 2});
  for (std::size_t a = 0; a < na; ++a) {
    const AgentTrack& tr = s.agents[a];
    for (std::size_t t = 0; t < to; ++t) {
      const std::size_t r = a * to + t;
      const Vec2 p = tr.positions[t], dp = tr.displacements[t];
      in.agents.at(r, 0) = p.x;
      in.agents.at(r, 1) = p.y;
      in.agents.at(r, 2) = dp.x;
      in.agents.at(r, 3) = dp.y;
      in.agents.at(r, 4) = dp.norm();
      in.agents.at(r, 5) = tr.velocities[t];
      in.agent_mask[r] = tr.mask[t];
    }
    in.agent_last.at(a, 0) = tr.positions.back().x;
    in.agent_last.at(a, 1) = tr.positions.back().y;
  }

  std::size_t points = 0;
  in.map_offsets.push_back(0);
  for (const auto& pl : s.polylines) {
    points += pl.points.size();
    in.map_offsets.push_back(points);
  }
  in.map_points = Tensor({points, 4});
  in.centers = Tensor({na + s.polylines.size(), 2});
  for (std::size_t a = 0; a < na; ++a) {
    in.centers.at(a, 0) = in.agent_last.at(a, 0);
    in.centers.at(a, 1) = in.agent_last.at(a, 1);
  }
  for (std::size_t m = 0; m < s.polylines.size(); ++m) {
    const MapPolyline& pl = s.polylines[m];
    for (std::size_t i = 0; i < pl.points.size(); ++i) {
      const std::size_t r = in.map_offsets[m] + i;
      in.map_points.at(r, 0) = pl.points[i].x;
      in.map_points.at(r, 1) = pl.points[i].y;
      in.map_points.at(r, 2) = pl.displacements[i].x;
      in.map_points.at(r, 3) = pl.displacements[i].y;
    }
    const Vec2 c = pl.centroid();
    in.centers.at(na + m, 0) = c.x;
    in.centers.at(na + m, 1) = c.y;
  }

  const DeviationBundle dev = deviation_bundle(s);
  in.dev_individual = dev.individual;
  in.dev_group = dev.group;

  if (s.has_future()) {
    in.future = Tensor({tf_len, 2});
    for (std::size_t t = 0; t < tf_len; ++t) {
      in.future.at(t, 0) = s.future[t].x;
      in.future.at(t, 1) = s.future[t].y;
    }
  }
  in.neighbor_future = Tensor({na * tf_len, 2});
  in.neighbor_valid.assign(na, 0);
  for (std::size_t a = 0; a < na; ++a) {
    const AgentTrack& tr = s.agents[a];
    if (a == in.target || tr.future.size() != tf_len) continue;
    in.neighbor_valid[a] = 1;
    for (std::size_t t = 0; t < tf_len; ++t) {
      in.neighbor_future.at(a * tf_len + t, 0) = tr.future[t].x;
      in.neighbor_future.at(a * tf_len + t, 1) = tr.future[t].y;
    }
  }
  return in;
}

Tensor embed_features(const Tensor& x, const std::vector<double>& scale, std::size_t bands) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (scale.size() != cols) throw ValidationError("embed_features: scale width mismatch");
  Tensor scaled({rows, cols});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) scaled.at(r, c) = x.at(r, c) / scale[c];
  const Tensor f = fourier_embed(scaled, bands);
  const std::size_t w = cols + f.cols();
  Tensor out({rows, w});
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = scaled.at(r, c);
    for (std::size_t c = 0; c < f.cols(); ++c) out.at(r, cols + c) = f.at(r, c);
  }
  return out;
}

namespace {

std::size_t embed_width(std::size_t cols, std::size_t bands) { return cols * (1 + 2 * bands); }

void check_cols(const Tensor& t, std::size_t cols, const char* what) {
  if (t.cols() != cols)
    throw ValidationError(std::string(what) + ": expected " + std::to_string(cols) + " columns, got " +
                          std::to_string(t.cols()));
}

}  // namespace

SceneEncoder::SceneEncoder(ParamStore& store, const ModelConfig& config, RngStream& rng)
    : config_(config) {
  config.validate();
  const std::size_t d = config.d, b = config.fourier_bands;
  const double ps = config.position_scale, ss = config.speed_scale;
  agent_scale_ = {ps, ps, 1.0, 1.0, 1.0, ss};
  map_scale_ = {ps, ps, 1.0, 1.0};
  center_scale_ = {ps, ps};

  motion_embed_ = Mlp(store, "enc.agent.embed", {embed_width(6, b), d, d}, rng);
  time_embed_ = &store.add_normal("enc.agent.time", {config.horizon.t_obs, d}, 0.02, rng);
  for (std::size_t l = 0; l < config.layers; ++l)
    temporal_.emplace_back(store, "enc.agent.temporal." + std::to_string(l), d, config.heads,
                           config.ffn_hidden, rng);
  point_embed_ = Mlp(store, "enc.map.embed", {embed_width(4, b), d, d}, rng);
  for (std::size_t r = 0; r < 2; ++r)
    polyline_rounds_.emplace_back(store, "enc.map.round." + std::to_string(r),
                                  std::vector<std::size_t>{d, d, d}, rng);
  spatial_embed_ = Mlp(store, "enc.scene.spatial", {embed_width(2, b), d, d}, rng);
  for (std::size_t l = 0; l < config.layers; ++l)
    fusion_.emplace_back(store, "enc.scene.fusion." + std::to_string(l), d, config.heads,
                         config.ffn_hidden, rng);
  dev_individual_ = Mlp(store, "enc.dev.individual", {6, d, d}, rng);
  dev_group_ = Mlp(store, "enc.dev.group", {2, d, d}, rng);
  dev_fuser_ = Mlp(store, "enc.dev.fuser", {2 * d, d, d}, rng);
  dev_layer_ = EncoderLayer(store, "enc.dev.layer", d, config.heads, config.ffn_hidden, rng);
}

std::pair<Var, Var> SceneEncoder::encode_agents(const ForwardCtx& ctx, const SceneInput& in) const {
  const std::size_t to = config_.horizon.t_obs;
  check_cols(in.agents, 6, "encode_agents");
  if (in.num_agents == 0 || in.agents.rows() != in.num_agents * to || in.agent_mask.size() != in.agents.rows())
    throw ValidationError("encode_agents: agent tensor does not match N_a x T_o");
  if (in.target >= in.num_agents) throw ValidationError("encode_agents: target index out of range");

  Var x = motion_embed_(ctx, ctx.tape.constant(embed_features(in.agents, agent_scale_, config_.fourier_bands)));
  std::vector<std::size_t> tile(in.num_agents * to);
  for (std::size_t r = 0; r < tile.size(); ++r) tile[r] = r % to;
  x = add(x, gather_rows(ctx.p(*time_embed_), tile));
  for (const auto& layer : temporal_) x = layer(ctx, x, in.num_agents, in.agent_mask);

  std::vector<std::size_t> last(in.num_agents);
  for (std::size_t a = 0; a < in.num_agents; ++a) last[a] = a * to + to - 1;
  return {gather_rows(x, last), slice_rows(x, in.target * to, to)};
}

Var SceneEncoder::encode_map(const ForwardCtx& ctx, const SceneInput& in) const {
  check_cols(in.map_points, 4, "encode_map");
  if (in.map_offsets.empty() || in.map_offsets.back() != in.map_points.rows())
    throw ValidationError("encode_map: offsets do not cover the point rows");
  for (std::size_t m = 0; m + 1 < in.map_offsets.size(); ++m)
    if (in.map_offsets[m + 1] <= in.map_offsets[m]) throw ValidationError("encode_map: empty polyline");
  Var h = point_embed_(ctx, ctx.tape.constant(embed_features(in.map_points, map_scale_, config_.fourier_bands)));
  for (const auto& round : polyline_rounds_) {
    const Var global = segment_max(h, in.map_offsets);
    h = round(ctx, add(h, segment_broadcast(global, in.map_offsets)));
  }
  return segment_max(h, in.map_offsets);
}

Var SceneEncoder::fuse_scene_context(const ForwardCtx& ctx, Var c_a, Var c_m, const Tensor& centers) const {
  const Var tokens = c_m.valid() ? concat_rows({c_a, c_m}) : c_a;
  check_cols(centers, 2, "fuse_scene_context");
  if (centers.rows() != tokens.rows()) throw ValidationError("fuse_scene_context: one center per token required");
  Var x = add(tokens, spatial_embed_(ctx, ctx.tape.constant(embed_features(centers, center_scale_, config_.fourier_bands))));
  for (const auto& layer : fusion_) x = layer(ctx, x);
  return x;
}

Var SceneEncoder::fuse_deviation(const ForwardCtx& ctx, const Tensor& individual, const Tensor& group,
                                 Var x_tgt) const {
  const std::size_t to = config_.horizon.t_obs;
  check_cols(individual, 6, "fuse_deviation individual");
  check_cols(group, 2, "fuse_deviation group");
  if (individual.rows() != to || group.rows() != to || x_tgt.rows() != to)
    throw ValidationError("fuse_deviation: inputs must share T_o rows");
  Var x_dev;
  const auto& ab = config_.ablation;
  if (ab.individual) x_dev = dev_individual_(ctx, ctx.tape.constant(individual));
  if (ab.group) {
    const Var g = dev_group_(ctx, ctx.tape.constant(group));
    x_dev = x_dev.valid() ? add(x_dev, g) : g;
  }
  if (!x_dev.valid()) x_dev = ctx.tape.constant(Tensor({to, config_.d}));
  const Var fused = dev_fuser_(ctx, concat_cols({x_dev, x_tgt}));
  return dev_layer_(ctx, fused);
}

EncodedScene SceneEncoder::operator()(const ForwardCtx& ctx, const SceneInput& in) const {
  EncodedScene e;
  std::tie(e.c_a, e.x_tgt) = encode_agents(ctx, in);
  const Var c_m = in.num_polylines() > 0 ? encode_map(ctx, in) : Var();
  e.c_ctx = fuse_scene_context(ctx, e.c_a, c_m, in.centers);
  e.c_dev = fuse_deviation(ctx, in.dev_individual, in.dev_group, e.x_tgt);
  return e;
}

}  // namespace cdk
