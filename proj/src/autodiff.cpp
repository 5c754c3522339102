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

#include "cdk/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numbers>

namespace cdk {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using MapC = Eigen::Map<const RowMat>;

MapC as_mat(const Tensor& t) { return MapC(t.data().data(), t.rows(), t.cols()); }
MapC as_mat(const Tensor& t, std::size_t rows, std::size_t cols) {
  return MapC(t.data().data(), rows, cols);
}
MapM as_mat(Buffer& v, std::size_t rows, std::size_t cols) {
  return MapM(v.data(), rows, cols);
}
MapC as_mat(const Buffer& v, std::size_t rows, std::size_t cols) {
  return MapC(v.data(), rows, cols);
}

Tape& tape_of(Var a) {
  if (!a.valid()) throw ValidationError("operation on an empty Var");
  return a.tape();
}

void same_tape(Var a, Var b) {
  if (&tape_of(a) != &tape_of(b)) throw ValidationError("Vars from different tapes");
}

void expect_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.size() != b.size() || a.cols() != b.cols()) {
    throw ValidationError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  }
}

Tensor checked(Tensor t, const char* op) {
  t.check_finite(op);
  return t;
}

constexpr double kLogClamp = 1e-12;

}  // namespace

const Tensor& Var::value() const {
  if (!tape_) throw ValidationError("value() on an empty Var");
  return tape_->value(id_);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Tape::param(const Tensor& value, std::size_t slot) {
  if (auto it = param_ids_.find(&value); it != param_ids_.end()) return Var(this, it->second);
  Node n;
  n.external = &value;
  n.requires_grad = true;
  n.slot = slot;
  nodes_.push_back(std::move(n));
  const auto id = static_cast<std::uint32_t>(nodes_.size() - 1);
  param_ids_.emplace(&value, id);
  param_order_.push_back(id);
  return Var(this, id);
}

Var Tape::push(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return push(std::move(value), std::vector<Var>(inputs), std::move(fn));
}

Var Tape::push(Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  Node n;
  n.owned = std::move(value);
  for (const auto& in : inputs) {
    if (in.valid() && nodes_[in.id()].requires_grad) n.requires_grad = true;
  }
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tensor& Tape::value(std::uint32_t id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.owned;
}

Buffer& Tape::grad(std::uint32_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(value(id).size(), 0.0);
  return n.grad;
}

void Tape::backward(Var out) {
  if (out.value().size() != 1) {
    throw ValidationError("backward() without seed needs a single-element output, got " +
                          shape_str(out.value().shape()));
  }
  const double one = 1.0;
  backward(out, std::span<const double>(&one, 1));
}

void Tape::backward(Var out, std::span<const double> seed) {
  if (&out.tape() != this) throw ValidationError("backward on a foreign Var");
  auto& g = grad(out.id());
  if (seed.size() != g.size()) throw ValidationError("backward seed size mismatch");
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
  for (std::int64_t id = out.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
    n.backward(*this, static_cast<std::uint32_t>(id));
  }
}

std::span<const double> Tape::param_grad(const Tensor& value) const {
  auto it = param_ids_.find(&value);
  if (it == param_ids_.end()) return {};
  return nodes_[it->second].grad;
}

void Tape::for_each_param_grad(
    const std::function<void(std::size_t, std::span<const double>)>& fn) const {
  for (auto id : param_order_) {
    const Node& n = nodes_[id];
    if (!n.grad.empty()) fn(n.slot, n.grad);
  }
}

// ---------------------------------------------------------------------------

Var add(Var a, Var b) {
  same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  expect_same_shape(x, y, "add");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(checked(std::move(out), "add"), {a, b}, [ia, ib](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    for (auto id : {ia, ib}) {
      if (!t.requires_grad(id)) continue;
      auto& gi = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  expect_same_shape(x, y, "sub");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(checked(std::move(out), "sub"), {a, b}, [ia, ib](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  const Tensor& x = a.value();
  const Tensor& y = b.value();
  expect_same_shape(x, y, "mul");
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  const auto ia = a.id(), ib = b.id();
  return a.tape().push(checked(std::move(out), "mul"), {a, b}, [ia, ib](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    const Tensor& x = t.value(ia);
    const Tensor& y = t.value(ib);
    if (t.requires_grad(ia)) {
      auto& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
    }
    if (t.requires_grad(ib)) {
      auto& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * x[i];
    }
  });
}

Var scale(Var a, double s) {
  const Tensor& x = tape_of(a).value(a.id());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
  const auto ia = a.id();
  return a.tape().push(checked(std::move(out), "scale"), {a}, [ia, s](Tape& t, std::uint32_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

Var add_bias(Var x, Var bias) {
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.size() != xv.cols()) throw ValidationError("add_bias: bias length mismatch");
  Tensor out = xv;
  const std::size_t R = xv.rows(), C = xv.cols();
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += bv[c];
  const auto ix = x.id(), ib = bias.id();
  return x.tape().push(checked(std::move(out), "add_bias"), {x, bias},
                       [ix, ib, R, C](Tape& t, std::uint32_t s) {
                         const auto& g = t.grad(s);
                         if (t.requires_grad(ix)) {
                           auto& gx = t.grad(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                         }
                         if (t.requires_grad(ib)) {
                           auto& gb = t.grad(ib);
                           for (std::size_t r = 0; r < R; ++r)
                             for (std::size_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
                         }
                       });
}

Var matmul(Var a, Var b) { return linear(a, b, Var()); }

Var linear(Var x, Var w, Var b) {
  same_tape(x, w);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0)) {
    throw ValidationError("linear/matmul: inner dimension mismatch " + shape_str(xv.shape()) +
                          " x " + shape_str(wv.shape()));
  }
  const std::size_t R = xv.rows(), K = xv.cols(), C = wv.dim(1);
  Shape shape = xv.shape();
  shape.back() = C;
  Tensor out(shape);
  MapM o(out.data().data(), R, C);
  o.noalias() = as_mat(xv) * as_mat(wv);
  const bool has_bias = b.valid();
  if (has_bias) {
    same_tape(x, b);
    const Tensor& bv = b.value();
    if (bv.size() != C) throw ValidationError("linear: bias length mismatch");
    o.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bv.data().data(), C);
  }
  const auto ix = x.id(), iw = w.id();
  const auto ib = has_bias ? b.id() : 0u;
  std::vector<Var> inputs{x, w};
  if (has_bias) inputs.push_back(b);
  return x.tape().push(
      checked(std::move(out), "linear"), inputs,
      [ix, iw, ib, has_bias, R, K, C](Tape& t, std::uint32_t s) {
        const auto& g = t.grad(s);
        auto G = as_mat(g, R, C);
        if (t.requires_grad(ix)) {
          auto gx = as_mat(t.grad(ix), R, K);
          gx.noalias() += G * as_mat(t.value(iw)).transpose();
        }
        if (t.requires_grad(iw)) {
          auto gw = as_mat(t.grad(iw), K, C);
          gw.noalias() += as_mat(t.value(ix), R, K).transpose() * G;
        }
        if (has_bias && t.requires_grad(ib)) {
          Eigen::Map<Eigen::RowVectorXd> gb(t.grad(ib).data(), C);
          gb += G.colwise().sum();
        }
      });
}

Var relu(Var x) {
  const Tensor& xv = tape_of(x).value(x.id());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  const auto ix = x.id();
  return x.tape().push(checked(std::move(out), "relu"), {x}, [ix](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    const Tensor& xv = t.value(ix);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) gx[i] += g[i];
  });
}

Var sigmoid(Var x) {
  const Tensor& xv = tape_of(x).value(x.id());
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  const auto ix = x.id();
  return x.tape().push(checked(std::move(out), "sigmoid"), {x}, [ix](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    const Tensor& y = t.value(s);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Tensor softmax_rows(const Tensor& x) {
  x.check_finite("softmax input");
  Tensor out(x.shape());
  const std::size_t R = x.rows(), C = x.cols();
  for (std::size_t r = 0; r < R; ++r) {
    const double* in = x.data().data() + r * C;
    double* o = out.data().data() + r * C;
    const double m = *std::max_element(in, in + C);
    double sum = 0.0;
    for (std::size_t c = 0; c < C; ++c) sum += (o[c] = std::exp(in[c] - m));
    for (std::size_t c = 0; c < C; ++c) o[c] /= sum;
  }
  return out;
}

Var softmax_rows(Var x) {
  Tensor out = softmax_rows(tape_of(x).value(x.id()));
  const auto ix = x.id();
  const std::size_t R = out.rows(), C = out.cols();
  return x.tape().push(std::move(out), {x}, [ix, R, C](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    const Tensor& y = t.value(s);
    auto& gx = t.grad(ix);
    for (std::size_t r = 0; r < R; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * y[r * C + c];
      for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += y[r * C + c] * (g[r * C + c] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  same_tape(x, gain);
  same_tape(x, bias);
  const Tensor& xv = x.value();
  const std::size_t R = xv.rows(), C = xv.cols();
  if (gain.value().size() != C || bias.value().size() != C) {
    throw ValidationError("layer_norm: gain/bias length mismatch");
  }
  xv.check_finite("layer_norm input");
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(R);
  for (std::size_t r = 0; r < R; ++r) {
    const double* in = xv.data().data() + r * C;
    double mean = 0.0;
    for (std::size_t c = 0; c < C; ++c) mean += in[c];
    mean /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (in[c] - mean) * is;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = h * gv[c] + bv[c];
    }
  }
  const auto ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.tape().push(
      checked(std::move(out), "layer_norm"), {x, gain, bias},
      [ix, ig, ib, R, C, xhat, inv_std](Tape& t, std::uint32_t s) {
        const auto& g = t.grad(s);
        const Tensor& gv = t.value(ig);
        if (t.requires_grad(ig)) {
          auto& gg = t.grad(ig);
          for (std::size_t i = 0; i < g.size(); ++i) gg[i % C] += g[i] * (*xhat)[i];
        }
        if (t.requires_grad(ib)) {
          auto& gb = t.grad(ib);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i % C] += g[i];
        }
        if (t.requires_grad(ix)) {
          auto& gx = t.grad(ix);
          const double invC = 1.0 / static_cast<double>(C);
          for (std::size_t r = 0; r < R; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
              const double dh = g[r * C + c] * gv[c];
              m1 += dh;
              m2 += dh * (*xhat)[r * C + c];
            }
            m1 *= invC;
            m2 *= invC;
            for (std::size_t c = 0; c < C; ++c) {
              const double dh = g[r * C + c] * gv[c];
              gx[r * C + c] += (*inv_std)[r] * (dh - m1 - (*xhat)[r * C + c] * m2);
            }
          }
        }
      });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_cols: no inputs");
  const std::size_t R = parts.front().value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    if (p.value().rows() != R) throw ValidationError("concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    total += widths.back();
  }
  Tensor out({R, total});
  std::size_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const Tensor& v = parts[i].value();
    for (std::size_t r = 0; r < R; ++r)
      std::copy_n(v.data().data() + r * widths[i], widths[i], out.data().data() + r * total + off);
    off += widths[i];
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().push(std::move(out), parts,
                                   [ids, widths, R, total](Tape& t, std::uint32_t s) {
                                     const auto& g = t.grad(s);
                                     std::size_t off = 0;
                                     for (std::size_t i = 0; i < ids.size(); ++i) {
                                       if (t.requires_grad(ids[i])) {
                                         auto& gi = t.grad(ids[i]);
                                         for (std::size_t r = 0; r < R; ++r)
                                           for (std::size_t c = 0; c < widths[i]; ++c)
                                             gi[r * widths[i] + c] += g[r * total + off + c];
                                       }
                                       off += widths[i];
                                     }
                                   });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ValidationError("concat_rows: no inputs");
  const std::size_t C = parts.front().value().cols();
  std::vector<std::size_t> sizes;
  std::size_t rows = 0;
  for (const auto& p : parts) {
    same_tape(parts.front(), p);
    if (p.value().cols() != C) throw ValidationError("concat_rows: column count mismatch");
    sizes.push_back(p.value().size());
    rows += p.value().rows();
  }
  Tensor out({rows, C});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + off);
    off += p.value().size();
  }
  std::vector<std::uint32_t> ids;
  for (const auto& p : parts) ids.push_back(p.id());
  return parts.front().tape().push(std::move(out), parts, [ids, sizes](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    std::size_t off = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) {
        auto& gi = t.grad(ids[i]);
        for (std::size_t j = 0; j < sizes[i]; ++j) gi[j] += g[off + j];
      }
      off += sizes[i];
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
  const Tensor& xv = tape_of(x).value(x.id());
  const std::size_t C = xv.cols();
  if (count == 0 || begin + count > xv.rows()) throw ValidationError("slice_rows: out of range");
  Tensor out({count, C},
             std::vector<double>(xv.data().begin() + begin * C,
                                 xv.data().begin() + (begin + count) * C));
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, begin, C](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * C + i] += g[i];
  });
}

Var gather_rows(Var x, const std::vector<std::size_t>& index) {
  const Tensor& xv = tape_of(x).value(x.id());
  const std::size_t C = xv.cols();
  if (index.empty()) throw ValidationError("gather_rows: empty index");
  Tensor out({index.size(), C});
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= xv.rows()) throw ValidationError("gather_rows: index out of range");
    std::copy_n(xv.data().data() + index[i] * C, C, out.data().data() + i * C);
  }
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, index, C](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < index.size(); ++i)
      for (std::size_t c = 0; c < C; ++c) gx[index[i] * C + c] += g[i * C + c];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = tape_of(x).value(x.id()).reshaped(std::move(shape));
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

namespace {
void check_offsets(const std::vector<std::size_t>& offsets, std::size_t rows, const char* op) {
  if (offsets.size() < 2 || offsets.front() != 0 || offsets.back() != rows) {
    throw ValidationError(std::string(op) + ": offsets must run from 0 to the row count");
  }
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
    if (offsets[s + 1] <= offsets[s]) throw ValidationError(std::string(op) + ": empty segment");
  }
}
}  // namespace

Var segment_max(Var x, const std::vector<std::size_t>& offsets) {
  const Tensor& xv = tape_of(x).value(x.id());
  const std::size_t C = xv.cols();
  check_offsets(offsets, xv.rows(), "segment_max");
  const std::size_t S = offsets.size() - 1;
  Tensor out({S, C});
  auto argmax = std::make_shared<std::vector<std::size_t>>(S * C);
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t c = 0; c < C; ++c) {
      std::size_t best = offsets[s];
      for (std::size_t r = offsets[s] + 1; r < offsets[s + 1]; ++r)
        if (xv[r * C + c] > xv[best * C + c]) best = r;
      (*argmax)[s * C + c] = best;
      out[s * C + c] = xv[best * C + c];
    }
  }
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, argmax, C](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i] * C + i % C] += g[i];
  });
}

Var segment_mean(Var x, const std::vector<std::size_t>& offsets) {
  const Tensor& xv = tape_of(x).value(x.id());
  const std::size_t C = xv.cols();
  check_offsets(offsets, xv.rows(), "segment_mean");
  const std::size_t S = offsets.size() - 1;
  Tensor out({S, C});
  for (std::size_t s = 0; s < S; ++s) {
    const double inv = 1.0 / static_cast<double>(offsets[s + 1] - offsets[s]);
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      for (std::size_t c = 0; c < C; ++c) out[s * C + c] += xv[r * C + c];
    for (std::size_t c = 0; c < C; ++c) out[s * C + c] *= inv;
  }
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, offsets, C](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg) {
      const double inv = 1.0 / static_cast<double>(offsets[seg + 1] - offsets[seg]);
      for (std::size_t r = offsets[seg]; r < offsets[seg + 1]; ++r)
        for (std::size_t c = 0; c < C; ++c) gx[r * C + c] += g[seg * C + c] * inv;
    }
  });
}

Var segment_broadcast(Var x, const std::vector<std::size_t>& offsets) {
  const Tensor& xv = tape_of(x).value(x.id());
  const std::size_t C = xv.cols();
  if (offsets.size() != xv.rows() + 1) {
    throw ValidationError("segment_broadcast: one segment per input row required");
  }
  check_offsets(offsets, offsets.back(), "segment_broadcast");
  Tensor out({offsets.back(), C});
  for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
    for (std::size_t r = offsets[s]; r < offsets[s + 1]; ++r)
      std::copy_n(xv.data().data() + s * C, C, out.data().data() + r * C);
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, offsets, C](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t seg = 0; seg + 1 < offsets.size(); ++seg)
      for (std::size_t r = offsets[seg]; r < offsets[seg + 1]; ++r)
        for (std::size_t c = 0; c < C; ++c) gx[seg * C + c] += g[r * C + c];
  });
}

Var cumsum_blocks(Var x, std::size_t block) {
  const Tensor& xv = tape_of(x).value(x.id());
  const std::size_t R = xv.rows(), C = xv.cols();
  if (block == 0 || R % block != 0) throw ValidationError("cumsum_blocks: rows not divisible by block");
  Tensor out = xv;
  for (std::size_t r = 0; r < R; ++r) {
    if (r % block == 0) continue;
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] += out[(r - 1) * C + c];
  }
  const auto ix = x.id();
  return x.tape().push(checked(std::move(out), "cumsum"), {x}, [ix, R, C, block](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    std::vector<double> acc(C, 0.0);
    for (std::size_t r = R; r-- > 0;) {
      if ((r + 1) % block == 0) std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t c = 0; c < C; ++c) {
        acc[c] += g[r * C + c];
        gx[r * C + c] += acc[c];
      }
    }
  });
}

Var mul_by_column(Var e, Var gate, std::size_t k) {
  same_tape(e, gate);
  const Tensor& ev = e.value();
  const Tensor& gv = gate.value();
  const std::size_t R = ev.rows(), C = ev.cols(), G = gv.cols();
  if (gv.rows() != R || k >= G) throw ValidationError("mul_by_column: shape mismatch");
  Tensor out(ev.shape());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = ev[r * C + c] * gv[r * G + k];
  const auto ie = e.id(), ig = gate.id();
  return e.tape().push(std::move(out), {e, gate}, [ie, ig, R, C, G, k](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    const Tensor& ev = t.value(ie);
    const Tensor& gv = t.value(ig);
    if (t.requires_grad(ie)) {
      auto& ge = t.grad(ie);
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) ge[r * C + c] += g[r * C + c] * gv[r * G + k];
    }
    if (t.requires_grad(ig)) {
      auto& gg = t.grad(ig);
      for (std::size_t r = 0; r < R; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < C; ++c) dot += g[r * C + c] * ev[r * C + c];
        gg[r * G + k] += dot;
      }
    }
  });
}

Var gated_mix(Var a, Var b, Var gamma) {
  same_tape(a, b);
  same_tape(a, gamma);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const Tensor& gv = gamma.value();
  expect_same_shape(av, bv, "gated_mix");
  expect_same_shape(av, gv, "gated_mix");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double v = gv[i] * bv[i] + (1.0 - gv[i]) * av[i];
    // Rounding can push a convex combination one ulp past its endpoints.
    out[i] = std::clamp(v, std::min(av[i], bv[i]), std::max(av[i], bv[i]));
  }
  const auto ia = a.id(), ib = b.id(), ig = gamma.id();
  return a.tape().push(checked(std::move(out), "gated_mix"), {a, b, gamma},
                       [ia, ib, ig](Tape& t, std::uint32_t s) {
                         const auto& g = t.grad(s);
                         const Tensor& av = t.value(ia);
                         const Tensor& bv = t.value(ib);
                         const Tensor& gv = t.value(ig);
                         if (t.requires_grad(ia)) {
                           auto& ga = t.grad(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - gv[i]);
                         }
                         if (t.requires_grad(ib)) {
                           auto& gb = t.grad(ib);
                           for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * gv[i];
                         }
                         if (t.requires_grad(ig)) {
                           auto& gg = t.grad(ig);
                           for (std::size_t i = 0; i < g.size(); ++i) gg[i] += g[i] * (bv[i] - av[i]);
                         }
                       });
}

Var broadcast_add_modes(Var modes, Var steps) {
  same_tape(modes, steps);
  const Tensor& mv = modes.value();
  const Tensor& sv = steps.value();
  if (mv.cols() != sv.cols()) throw ValidationError("broadcast_add_modes: feature width mismatch");
  const std::size_t K = mv.rows(), T = sv.rows(), C = mv.cols();
  Tensor out({K * T, C});
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t c = 0; c < C; ++c) out[(k * T + t) * C + c] = mv[k * C + c] + sv[t * C + c];
  const auto im = modes.id(), is = steps.id();
  return modes.tape().push(checked(std::move(out), "broadcast_add_modes"), {modes, steps},
                           [im, is, K, T, C](Tape& tp, std::uint32_t s) {
                             const auto& g = tp.grad(s);
                             if (tp.requires_grad(im)) {
                               auto& gm = tp.grad(im);
                               for (std::size_t k = 0; k < K; ++k)
                                 for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t c = 0; c < C; ++c)
                                     gm[k * C + c] += g[(k * T + t) * C + c];
                             }
                             if (tp.requires_grad(is)) {
                               auto& gs = tp.grad(is);
                               for (std::size_t k = 0; k < K; ++k)
                                 for (std::size_t t = 0; t < T; ++t)
                                   for (std::size_t c = 0; c < C; ++c)
                                     gs[t * C + c] += g[(k * T + t) * C + c];
                             }
                           });
}

Var sum_all(Var x) {
  const Tensor& xv = tape_of(x).value(x.id());
  double acc = 0.0;
  for (double v : xv.data()) acc += v;
  const auto ix = x.id();
  return x.tape().push(checked(Tensor::scalar(acc), "sum_all"), {x}, [ix](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    for (auto& v : t.grad(ix)) v += g;
  });
}

Var mean_all(Var x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size())); }

Var dropout(Var x, double rate, RngStream& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw ValidationError("dropout rate must be < 1");
  const Tensor& xv = tape_of(x).value(x.id());
  auto mask = std::make_shared<std::vector<double>>(xv.size());
  const double keep = 1.0 / (1.0 - rate);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    (*mask)[i] = rng.uniform() >= rate ? keep : 0.0;
    out[i] = xv[i] * (*mask)[i];
  }
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, mask](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    auto& gx = t.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
  });
}

Tensor fourier_embed(const Tensor& x, std::size_t bands) {
  if (bands == 0) throw ValidationError("fourier_embed: bands must be >= 1");
  x.check_finite("fourier_embed input");
  const std::size_t R = x.rows(), F = x.cols();
  Shape shape = x.shape();
  shape.back() = 2 * bands * F;
  Tensor out(shape);
  const std::size_t W = 2 * bands * F;
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t f = 0; f < F; ++f) {
      const double v = x[r * F + f];
      for (std::size_t b = 0; b < bands; ++b) {
        const double w = std::ldexp(std::numbers::pi, static_cast<int>(b));
        out[r * W + f * 2 * bands + b] = std::sin(w * v);
        out[r * W + f * 2 * bands + bands + b] = std::cos(w * v);
      }
    }
  }
  return out;
}

Var fourier_embed(Var x, std::size_t bands) {
  Tensor out = fourier_embed(tape_of(x).value(x.id()), bands);
  const auto ix = x.id();
  return x.tape().push(std::move(out), {x}, [ix, bands](Tape& t, std::uint32_t s) {
    const auto& g = t.grad(s);
    const Tensor& xv = t.value(ix);
    const Tensor& y = t.value(s);
    auto& gx = t.grad(ix);
    const std::size_t R = xv.rows(), F = xv.cols(), W = 2 * bands * F;
    for (std::size_t r = 0; r < R; ++r)
      for (std::size_t f = 0; f < F; ++f)
        for (std::size_t b = 0; b < bands; ++b) {
          const double w = std::ldexp(std::numbers::pi, static_cast<int>(b));
          const std::size_t is = r * W + f * 2 * bands + b;
          const std::size_t ic = is + bands;
          gx[r * F + f] += w * (g[is] * y[ic] - g[ic] * y[is]);
        }
  });
}

Var attention(Var q, Var k, Var v, std::size_t heads, std::size_t groups,
              const std::vector<std::uint8_t>& key_mask, std::vector<double>* weights_out) {
  same_tape(q, k);
  same_tape(q, v);
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  const std::size_t d = qv.cols();
  if (kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows()) {
    throw ValidationError("attention: q/k/v shape mismatch");
  }
  if (heads == 0 || d % heads != 0) {
    throw ValidationError("attention: feature width " + std::to_string(d) +
                          " not divisible by head count " + std::to_string(heads));
  }
  if (groups == 0 || qv.rows() % groups != 0 || kv.rows() % groups != 0) {
    throw ValidationError("attention: rows not divisible into groups");
  }
  if (!key_mask.empty() && key_mask.size() != kv.rows()) {
    throw ValidationError("attention: key mask length mismatch");
  }
  const std::size_t Lq = qv.rows() / groups, Lk = kv.rows() / groups, dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto weights = std::make_shared<std::vector<double>>(groups * heads * Lq * Lk, 0.0);
  Tensor out({qv.rows(), d});
  auto Q = as_mat(qv);
  auto K = as_mat(kv);
  auto V = as_mat(vv);
  MapM O(out.data().data(), qv.rows(), d);
  RowMat S(Lq, Lk);
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t h = 0; h < heads; ++h) {
      S.noalias() = Q.block(g * Lq, h * dh, Lq, dh) * K.block(g * Lk, h * dh, Lk, dh).transpose();
      S *= sc;
      MapM A(weights->data() + (g * heads + h) * Lq * Lk, Lq, Lk);
      for (std::size_t i = 0; i < Lq; ++i) {
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Lk; ++j)
          if (key_mask.empty() || key_mask[g * Lk + j]) m = std::max(m, S(i, j));
        if (!std::isfinite(m)) continue;  // no valid key: row stays zero
        double sum = 0.0;
        for (std::size_t j = 0; j < Lk; ++j) {
          const double e = (key_mask.empty() || key_mask[g * Lk + j]) ? std::exp(S(i, j) - m) : 0.0;
          A(i, j) = e;
          sum += e;
        }
        A.row(i) /= sum;
      }
      O.block(g * Lq, h * dh, Lq, dh).noalias() = A * V.block(g * Lk, h * dh, Lk, dh);
    }
  }
  if (weights_out) *weights_out = *weights;
  const auto iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().push(
      checked(std::move(out), "attention"), {q, k, v},
      [iq, ik, iv, weights, groups, heads, Lq, Lk, dh, d, sc](Tape& t, std::uint32_t s) {
        const auto& gout = t.grad(s);
        auto G = as_mat(gout, groups * Lq, d);
        auto Q = as_mat(t.value(iq));
        auto K = as_mat(t.value(ik));
        auto V = as_mat(t.value(iv));
        const bool nq = t.requires_grad(iq), nk = t.requires_grad(ik), nv = t.requires_grad(iv);
        RowMat dA(Lq, Lk), dS(Lq, Lk);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t h = 0; h < heads; ++h) {
            MapC A(weights->data() + (g * heads + h) * Lq * Lk, Lq, Lk);
            auto Gb = G.block(g * Lq, h * dh, Lq, dh);
            if (nv) {
              auto gv = as_mat(t.grad(iv), groups * Lk, d);
              gv.block(g * Lk, h * dh, Lk, dh).noalias() += A.transpose() * Gb;
            }
            if (!nq && !nk) continue;
            dA.noalias() = Gb * V.block(g * Lk, h * dh, Lk, dh).transpose();
            for (std::size_t i = 0; i < Lq; ++i) {
              const double dot = A.row(i).dot(dA.row(i));
              for (std::size_t j = 0; j < Lk; ++j) dS(i, j) = A(i, j) * (dA(i, j) - dot) * sc;
            }
            if (nq) {
              auto gq = as_mat(t.grad(iq), groups * Lq, d);
              gq.block(g * Lq, h * dh, Lq, dh).noalias() += dS * K.block(g * Lk, h * dh, Lk, dh);
            }
            if (nk) {
              auto gk = as_mat(t.grad(ik), groups * Lk, d);
              gk.block(g * Lk, h * dh, Lk, dh).noalias() +=
                  dS.transpose() * Q.block(g * Lq, h * dh, Lq, dh);
            }
          }
        }
      });
}

double smooth_l1(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape()) {
    throw ValidationError("smooth_l1: shape mismatch " + shape_str(pred.shape()) + " vs " +
                          shape_str(target.shape()));
  }
  const std::size_t T = pred.rows();
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = std::abs(pred[i] - target[i]);
    acc += e < 1.0 ? 0.5 * e * e : e - 0.5;
  }
  return acc / static_cast<double>(T);
}

Var smooth_l1(Var pred, const Tensor& target) {
  const Tensor& pv = tape_of(pred).value(pred.id());
  const double loss = smooth_l1(pv, target);
  const auto ip = pred.id();
  auto tgt = std::make_shared<Tensor>(target);
  const double invT = 1.0 / static_cast<double>(pv.rows());
  return pred.tape().push(checked(Tensor::scalar(loss), "smooth_l1"), {pred},
                          [ip, tgt, invT](Tape& t, std::uint32_t s) {
                            const double g = t.grad(s)[0];
                            const Tensor& pv = t.value(ip);
                            auto& gp = t.grad(ip);
                            for (std::size_t i = 0; i < pv.size(); ++i) {
                              const double e = pv[i] - (*tgt)[i];
                              const double d = std::abs(e) < 1.0 ? e : (e > 0 ? 1.0 : -1.0);
                              gp[i] += g * d * invT;
                            }
                          });
}

namespace {
void validate_probability_pair(const Tensor& probs, const Tensor& target) {
  if (probs.size() != target.size() || probs.size() == 0) {
    throw ValidationError("cross_entropy: size mismatch");
  }
  double sp = 0.0, st = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= 0.0) || !(target[i] >= 0.0)) {
      throw ValidationError("cross_entropy: negative or non-finite probability");
    }
    sp += probs[i];
    st += target[i];
  }
  if (std::abs(sp - 1.0) > 1e-6) throw ValidationError("cross_entropy: predictions do not sum to 1");
  if (std::abs(st - 1.0) > 1e-6) throw ValidationError("cross_entropy: target does not sum to 1");
}
}  // namespace

double cross_entropy(const Tensor& probs, const Tensor& target) {
  validate_probability_pair(probs, target);
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (target[i] == 0.0) continue;
    acc -= target[i] * std::log(std::max(probs[i], kLogClamp));
  }
  return acc;
}

Var cross_entropy(Var probs, const Tensor& target) {
  const Tensor& pv = tape_of(probs).value(probs.id());
  const double loss = cross_entropy(pv, target);
  const auto ip = probs.id();
  auto tgt = std::make_shared<Tensor>(target);
  return probs.tape().push(Tensor::scalar(loss), {probs}, [ip, tgt](Tape& t, std::uint32_t s) {
    const double g = t.grad(s)[0];
    const Tensor& pv = t.value(ip);
    auto& gp = t.grad(ip);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      if ((*tgt)[i] == 0.0 || pv[i] < kLogClamp) continue;
      gp[i] -= g * (*tgt)[i] / pv[i];
    }
  });
}

}  // namespace cdk
