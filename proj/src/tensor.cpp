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

#include "cdk/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace cdk {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) {
    if (e == 0) throw ValidationError("tensor extents must be positive: " + shape_str(shape));
    n *= e;
  }
  return shape.empty() ? 0 : n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

Tensor::Tensor(Shape shape, const std::vector<double>& data)
    : Tensor(std::move(shape), Buffer(data.begin(), data.end())) {}

Tensor::Tensor(Shape shape, std::initializer_list<double> data)
    : Tensor(std::move(shape), Buffer(data)) {}

Tensor::Tensor(Shape shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ValidationError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty() || rows.front().empty()) throw ValidationError("from_rows: empty input");
  const std::size_t c = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * c);
  for (const auto& r : rows) {
    if (r.size() != c) throw ValidationError("from_rows: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return Tensor({rows.size(), c}, std::move(data));
}

double Tensor::item() const {
  if (data_.size() != 1) throw ValidationError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

void Tensor::enable_grad() {
  if (!grad_) grad_.emplace(data_.size(), 0.0);
}

std::span<double> Tensor::grad() {
  if (!grad_) throw ValidationError("tensor has no gradient buffer");
  return *grad_;
}

std::span<const double> Tensor::grad() const {
  if (!grad_) throw ValidationError("tensor has no gradient buffer");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(std::string_view where) const {
  if (!all_finite()) {
    throw NumericError("non-finite value in " + std::string(where) + " (shape " +
                       shape_str(shape_) + ")");
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.size() != b.size()) throw ValidationError("max_abs_diff: size mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace cdk
