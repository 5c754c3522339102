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

#ifndef CDK_LAYERS_HPP_
#define CDK_LAYERS_HPP_

#include <deque>
#include <string>
#include <vector>

#include "cdk/autodiff.hpp"
#include "cdk/rng.hpp"

namespace cdk {

struct Parameter {
  std::string name;
  Tensor value;
  std::size_t index = 0;   // registration order
  std::size_t offset = 0;  // position in flat gradient / optimizer buffers
};

/// Owns every trainable array. Names are unique; addresses are stable.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Shape shape);
  Parameter& add_uniform(const std::string& name, Shape shape, double bound, RngStream& rng);
  Parameter& add_normal(const std::string& name, Shape shape, double stddev, RngStream& rng);
  Parameter& add_filled(const std::string& name, Shape shape, double value);

  std::size_t count() const noexcept { return params_.size(); }
  std::size_t total_size() const noexcept { return total_; }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }
  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::deque<Parameter> params_;
  std::size_t total_ = 0;
};

/// Per-forward state threaded through every layer.
struct ForwardCtx {
  Tape& tape;
  bool training = false;
  double dropout = 0.0;
  RngStream* rng = nullptr;

  Var p(const Parameter& param) const { return tape.param(param.value, param.index); }
  Var drop(Var x) const;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, std::size_t in, std::size_t out,
         RngStream& rng, bool bias = true);
  Var operator()(const ForwardCtx& ctx, Var x) const;
  std::size_t in() const noexcept { return in_; }
  std::size_t out() const noexcept { return out_; }
  const Parameter& weight() const { return *w_; }
  const Parameter* bias() const { return b_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
  std::size_t in_ = 0, out_ = 0;
};

/// Linear layers with ReLU between them (none after the last).
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, const std::vector<std::size_t>& widths,
      RngStream& rng);
  Var operator()(const ForwardCtx& ctx, Var x) const;
  const std::vector<Linear>& layers() const { return layers_; }

 private:
  std::vector<Linear> layers_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, std::size_t d);
  Var operator()(const ForwardCtx& ctx, Var x) const;
  const Parameter& gain() const { return *gain_; }
  const Parameter& bias() const { return *bias_; }

 private:
  Parameter* gain_ = nullptr;
  Parameter* bias_ = nullptr;
};

/// Projected multi-head attention: softmax(Q K^T / sqrt(d/heads)) V, heads
/// concatenated and output-projected back to d.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, std::size_t d,
                     std::size_t heads, RngStream& rng);
  Var operator()(const ForwardCtx& ctx, Var q, Var k, Var v, std::size_t groups = 1,
                 const std::vector<std::uint8_t>& key_mask = {},
                 std::vector<double>* weights_out = nullptr) const;
  std::size_t heads() const noexcept { return heads_; }
  const Linear& q_proj() const { return q_; }
  const Linear& k_proj() const { return k_; }
  const Linear& v_proj() const { return v_; }
  const Linear& out_proj() const { return o_; }

 private:
  Linear q_, k_, v_, o_;
  std::size_t heads_ = 1;
};

/// Pre-norm Transformer encoder layer: x + Drop(MHA(LN x)), then x + Drop(FFN(LN x)).
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParamStore& store, const std::string& name, std::size_t d, std::size_t heads,
               std::size_t ffn_hidden, RngStream& rng);
  Var operator()(const ForwardCtx& ctx, Var x, std::size_t groups = 1,
                 const std::vector<std::uint8_t>& key_mask = {}) const;

 private:
  LayerNorm ln_attn_, ln_ffn_;
  MultiHeadAttention attn_;
  Mlp ffn_;
};

/// Dense mixture of experts: sum_k softmax(x W_g + b_g)_k * Expert_k(x),
/// Expert_k(x) = ReLU(x W_k1 + b_k1) W_k2 + b_k2.
class MoeLayer {
 public:
  MoeLayer() = default;
  MoeLayer(ParamStore& store, const std::string& name, std::size_t d, std::size_t hidden,
           std::size_t experts, RngStream& rng);
  Var operator()(const ForwardCtx& ctx, Var x, Tensor* gate_out = nullptr) const;
  std::size_t experts() const noexcept { return experts_.size(); }
  const Mlp& expert(std::size_t k) const { return experts_.at(k); }
  const Linear& gate() const { return gate_; }

 private:
  std::vector<Mlp> experts_;
  Linear gate_;
};

enum class SelfAttentionPlacement { kAfterStreams, kBeforeStreams };

/**
 * Decoder block fusing a query with an ordered list of memory streams.
 *
 * For each stream: pre-norm cross-attention with residual dropout, then a
 * MoE feed-forward with residual dropout. Then pre-norm self-attention and a
 * final pre-norm MLP, each with a residual. Built with a fixed number of
 * stream slots; a forward call may pass fewer streams (slots used in order).
 */
class MultistreamBlock {
 public:
  MultistreamBlock() = default;
  MultistreamBlock(ParamStore& store, const std::string& name, std::size_t d, std::size_t heads,
                   std::size_t stream_slots, std::size_t experts, std::size_t expert_hidden,
                   std::size_t ffn_hidden, RngStream& rng);

  Var operator()(const ForwardCtx& ctx, Var query, const std::vector<Var>& streams,
                 SelfAttentionPlacement placement = SelfAttentionPlacement::kAfterStreams,
                 std::vector<Tensor>* gates_out = nullptr) const;

  struct StreamSlot {
    LayerNorm ln_query, ln_stream;
    MultiHeadAttention cross;
    MoeLayer moe;
  };
  const std::vector<StreamSlot>& slots() const { return slots_; }
  const LayerNorm& self_norm() const { return ln_self_; }
  const MultiHeadAttention& self_attention() const { return self_; }
  const LayerNorm& mlp_norm() const { return ln_mlp_; }
  const Mlp& mlp() const { return mlp_; }

 private:
  Var self_phase(const ForwardCtx& ctx, Var q) const;

  std::vector<StreamSlot> slots_;
  LayerNorm ln_self_, ln_mlp_;
  MultiHeadAttention self_;
  Mlp mlp_;
};

}  // namespace cdk

#endif  // CDK_LAYERS_HPP_
