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

#ifndef CDK_AUTODIFF_HPP_
#define CDK_AUTODIFF_HPP_

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <unordered_map>
#include <vector>

#include "cdk/rng.hpp"
#include "cdk/tensor.hpp"

namespace cdk {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  const Tensor& value() const;
  Tape& tape() const { return *tape_; }
  std::uint32_t id() const noexcept { return id_; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::uint32_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::uint32_t id_ = 0;
};

/**
 * Reverse-mode recording of one forward pass.
 *
 * Every op pushes a node holding its output value and a closure that reads
 * the node's gradient and accumulates into its inputs. Parameter nodes point
 * at externally owned tensors; their gradients are collected after backward().
 */
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Externally owned trainable tensor. Repeated calls with the same tensor
  /// return the same node. `slot` is the caller's index for gradient routing.
  Var param(const Tensor& value, std::size_t slot = 0);

  /// Record an op output. `inputs` determine whether the node needs a gradient.
  Var push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var push(Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

  const Tensor& value(std::uint32_t id) const;
  bool requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }
  bool requires_grad(Var v) const { return requires_grad(v.id()); }

  /// Gradient buffer for node `id`, allocated (zeroed) on first access.
  Buffer& grad(std::uint32_t id);
  bool has_grad(std::uint32_t id) const { return !nodes_[id].grad.empty(); }

  /// Seeds d(out)/d(out) = 1 (out must hold one element) and propagates.
  void backward(Var out);
  /// Propagates from an explicit output gradient.
  void backward(Var out, std::span<const double> seed);

  /// Gradient collected for a parameter tensor; empty if it was never used.
  std::span<const double> param_grad(const Tensor& value) const;
  /// Visits (slot, gradient) for every parameter node that received gradient.
  void for_each_param_grad(const std::function<void(std::size_t, std::span<const double>)>& fn) const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    Buffer grad;
    BackwardFn backward;
    bool requires_grad = false;
    std::size_t slot = 0;
  };
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::uint32_t> param_ids_;
  std::vector<std::uint32_t> param_order_;
};

// ---------------------------------------------------------------------------
// Differentiable ops. Rank-2 ops read a tensor as rows() x cols().

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
/// x (R x C) plus a length-C bias broadcast over rows.
Var add_bias(Var x, Var bias);
Var matmul(Var a, Var b);
/// x W + b, W is (in x out); `b` may be an invalid Var for no bias.
Var linear(Var x, Var w, Var b);
Var relu(Var x);
Var sigmoid(Var x);
Var softmax_rows(Var x);
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(Var x, std::size_t begin, std::size_t count);
Var gather_rows(Var x, const std::vector<std::size_t>& index);
Var reshape(Var x, Shape shape);
/// Segment s covers rows [offsets[s], offsets[s+1]).
Var segment_max(Var x, const std::vector<std::size_t>& offsets);
Var segment_mean(Var x, const std::vector<std::size_t>& offsets);
Var segment_broadcast(Var x, const std::vector<std::size_t>& offsets);
/// Running sum down rows, restarting every `block` rows.
Var cumsum_blocks(Var x, std::size_t block);
/// Row-wise multiply of e (R x C) by column k of gate (R x G).
Var mul_by_column(Var e, Var gate, std::size_t k);
/// gamma * b + (1 - gamma) * a, elementwise.
Var gated_mix(Var a, Var b, Var gamma);
/// out[k*T + t] = modes[k] + steps[t].
Var broadcast_add_modes(Var modes, Var steps);
Var sum_all(Var x);
Var mean_all(Var x);
Var dropout(Var x, double rate, RngStream& rng);
Var fourier_embed(Var x, std::size_t bands);

/**
 * Scaled dot-product attention over pre-projected q, k, v.
 *
 * Rows are split into `groups` independent sequences: q holds groups * Lq
 * rows, k and v hold groups * Lk rows. Feature columns are split into
 * `heads` equal slices. `key_mask` (empty or one byte per k row, nonzero =
 * valid) excludes padded keys; a query with no valid key outputs zeros.
 * When `weights_out` is given it receives softmax weights laid out
 * [group][head][query][key].
 */
Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t groups,
              const std::vector<std::uint8_t>& key_mask = {},
              std::vector<double>* weights_out = nullptr);

/// Mean over rows of per-coordinate smooth-L1, summed over coordinates.
Var smooth_l1(Var pred, const Tensor& target);
/// -sum_k p_k log(max(q_k, 1e-12)) for predicted probabilities q.
Var cross_entropy(Var probs, const Tensor& target);

// Plain-tensor helpers that share the op definitions.
Tensor fourier_embed(const Tensor& x, std::size_t bands);
Tensor softmax_rows(const Tensor& x);
double smooth_l1(const Tensor& pred, const Tensor& target);
double cross_entropy(const Tensor& probs, const Tensor& target);

}  // namespace cdk

#endif  // CDK_AUTODIFF_HPP_
