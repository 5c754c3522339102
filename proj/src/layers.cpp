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

#include "cdk/layers.hpp"

#include <cmath>

namespace cdk {

Parameter& ParamStore::add(const std::string& name, Shape shape) {
  if (find(name)) throw ValidationError("duplicate parameter name: " + name);
  Parameter p;
  p.name = name;
  p.value = Tensor(std::move(shape));
  p.index = params_.size();
  p.offset = total_;
  total_ += p.value.size();
  params_.push_back(std::move(p));
  return params_.back();
}

Parameter& ParamStore::add_uniform(const std::string& name, Shape shape, double bound,
                                   RngStream& rng) {
  Parameter& p = add(name, std::move(shape));
  for (auto& v : p.value.data()) v = rng.uniform(-bound, bound);
  return p;
}

Parameter& ParamStore::add_normal(const std::string& name, Shape shape, double stddev,
                                  RngStream& rng) {
  Parameter& p = add(name, std::move(shape));
  for (auto& v : p.value.data()) v = rng.normal(0.0, stddev);
  return p;
}

Parameter& ParamStore::add_filled(const std::string& name, Shape shape, double value) {
  Parameter& p = add(name, std::move(shape));
  for (auto& v : p.value.data()) v = value;
  return p;
}

const Parameter* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Parameter* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p.name == name) return &p;
  return nullptr;
}

Var ForwardCtx::drop(Var x) const {
  if (!training || dropout <= 0.0) return x;
  if (!rng) throw ValidationError("dropout during training needs an RngStream");
  return cdk::dropout(x, dropout, *rng);
}

Linear::Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
               RngStream& rng, bool bias)
    : in_(in), out_(out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  w_ = &store.add_uniform(name + ".weight", {in, out}, bound, rng);
  if (bias) b_ = &store.add_uniform(name + ".bias", {out}, bound, rng);
}

Var Linear::operator()(const ForwardCtx& ctx, Var x) const {
  return linear(x, ctx.p(*w_), b_ ? ctx.p(*b_) : Var());
}

Mlp::Mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
         RngStream& rng) {
  if (widths.size() < 2) throw ValidationError("Mlp needs at least input and output widths");
  for (std::size_t i = 0; i + 1 < widths.size(); ++i)
    layers_.emplace_back(store, name + "." + std::to_string(i), widths[i], widths[i + 1], rng);
}

Var Mlp::operator()(const ForwardCtx& ctx, Var x) const {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](ctx, x);
    if (i + 1 < layers_.size()) x = relu(x);
  }
  return x;
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, std::size_t d) {
  gain_ = &store.add_filled(name + ".gain", {d}, 1.0);
  bias_ = &store.add_filled(name + ".bias", {d}, 0.0);
}

Var LayerNorm::operator()(const ForwardCtx& ctx, Var x) const {
  return layer_norm(x, ctx.p(*gain_), ctx.p(*bias_));
}

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name,
                                       std::size_t d, std::size_t heads, RngStream& rng)
    : q_(store, name + ".q", d, d, rng),
      k_(store, name + ".k", d, d, rng),
      v_(store, name + ".v", d, d, rng),
      o_(store, name + ".o", d, d, rng),
      heads_(heads) {
  if (heads == 0 || d % heads != 0) {
    throw ValidationError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
  }
}

Var MultiHeadAttention::operator()(const ForwardCtx& ctx, Var q, Var k, Var v,
                                   std::size_t groups, const std::vector<std::uint8_t>& key_mask,
                                   std::vector<double>* weights_out) const {
  const Var qp = q_(ctx, q);
  const Var kp = k_(ctx, k);
  const Var vp = v_(ctx, v);
  return o_(ctx, attention(qp, kp, vp, heads_, groups, key_mask, weights_out));
}

EncoderLayer::EncoderLayer(ParamStore& store, const std::string& name, std::size_t d,
                           std::size_t heads, std::size_t ffn_hidden, RngStream& rng)
    : ln_attn_(store, name + ".ln_attn", d),
      ln_ffn_(store, name + ".ln_ffn", d),
      attn_(store, name + ".attn", d, heads, rng),
      ffn_(store, name + ".ffn", {d, ffn_hidden, d}, rng) {}

Var EncoderLayer::operator()(const ForwardCtx& ctx, Var x, std::size_t groups,
                             const std::vector<std::uint8_t>& key_mask) const {
  const Var h = ln_attn_(ctx, x);
  x = add(x, ctx.drop(attn_(ctx, h, h, h, groups, key_mask)));
  return add(x, ctx.drop(ffn_(ctx, ln_ffn_(ctx, x))));
}

MoeLayer::MoeLayer(ParamStore& store, const std::string& name, std::size_t d,
                   std::size_t hidden, std::size_t experts, RngStream& rng)
    : gate_(store, name + ".gate", d, experts, rng) {
  if (experts == 0) throw ValidationError("MoE layer needs at least one expert");
  for (std::size_t k = 0; k < experts; ++k)
    experts_.emplace_back(store, name + ".expert" + std::to_string(k),
                          std::vector<std::size_t>{d, hidden, d}, rng);
}

Var MoeLayer::operator()(const ForwardCtx& ctx, Var x, Tensor* gate_out) const {
  const Var gate = softmax_rows(gate_(ctx, x));
  if (gate_out) *gate_out = gate.value();
  Var acc;
  for (std::size_t k = 0; k < experts_.size(); ++k) {
    const Var weighted = mul_by_column(experts_[k](ctx, x), gate, k);
    acc = acc.valid() ? add(acc, weighted) : weighted;
  }
  return acc;
}

MultistreamBlock::MultistreamBlock(ParamStore& store, const std::string& name, std::size_t d,
                                   std::size_t heads, std::size_t stream_slots,
                                   std::size_t experts, std::size_t expert_hidden,
                                   std::size_t ffn_hidden, RngStream& rng) {
  for (std::size_t i = 0; i < stream_slots; ++i) {
    const std::string s = name + ".stream" + std::to_string(i);
    StreamSlot slot;
    slot.ln_query = LayerNorm(store, s + ".ln_query", d);
    slot.ln_stream = LayerNorm(store, s + ".ln_memory", d);
    slot.cross = MultiHeadAttention(store, s + ".cross", d, heads, rng);
    slot.moe = MoeLayer(store, s + ".moe", d, expert_hidden, experts, rng);
    slots_.push_back(std::move(slot));
  }
  ln_self_ = LayerNorm(store, name + ".ln_self", d);
  self_ = MultiHeadAttention(store, name + ".self", d, heads, rng);
  ln_mlp_ = LayerNorm(store, name + ".ln_mlp", d);
  mlp_ = Mlp(store, name + ".mlp", {d, ffn_hidden, d}, rng);
}

Var MultistreamBlock::self_phase(const ForwardCtx& ctx, Var q) const {
  const Var h = ln_self_(ctx, q);
  q = add(q, ctx.drop(self_(ctx, h, h, h)));
  return add(q, ctx.drop(mlp_(ctx, ln_mlp_(ctx, q))));
}

Var MultistreamBlock::operator()(const ForwardCtx& ctx, Var query,
                                 const std::vector<Var>& streams,
                                 SelfAttentionPlacement placement,
                                 std::vector<Tensor>* gates_out) const {
  if (streams.size() > slots_.size()) {
    throw ValidationError("multistream block got " + std::to_string(streams.size()) +
                          " streams but has " + std::to_string(slots_.size()) + " slots");
  }
  Var q = query;
  if (placement == SelfAttentionPlacement::kBeforeStreams) q = self_phase(ctx, q);
  for (std::size_t i = 0; i < streams.size(); ++i) {
    const StreamSlot& slot = slots_[i];
    if (streams[i].cols() != q.cols()) {
      throw ValidationError("multistream block: stream feature width mismatch");
    }
    const Var mem = slot.ln_stream(ctx, streams[i]);
    q = add(q, ctx.drop(slot.cross(ctx, slot.ln_query(ctx, q), mem, mem)));
    Tensor gate;
    q = add(q, ctx.drop(slot.moe(ctx, q, gates_out ? &gate : nullptr)));
    if (gates_out) gates_out->push_back(std::move(gate));
  }
  if (placement == SelfAttentionPlacement::kAfterStreams) q = self_phase(ctx, q);
  return q;
}

}  // namespace cdk
