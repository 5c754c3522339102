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

#ifndef CDK_TENSOR_HPP_
#define CDK_TENSOR_HPP_

#include <cstddef>
#include <initializer_list>
#include <new>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cdk {

/// Raised for malformed inputs: bad shapes, schema violations, invalid flags.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces NaN/Inf or otherwise cannot proceed.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels then see the same alignment on
/// every run and thread, which keeps floating-point results reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/**
 * Dense row-major array of doubles with an optional gradient buffer.
 *
 * Most of the model works on rank-2 tensors; `rows()` folds every leading
 * axis so a [N, T, d] tensor reads as (N*T) x d.
 */
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, Buffer data);
  Tensor(Shape shape, const std::vector<double>& data);
  Tensor(Shape shape, std::initializer_list<double> data);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor filled(Shape shape, double value);
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
  std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  Buffer& storage() noexcept { return data_; }
  const Buffer& storage() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols(), cols()};
  }

  /// Same data, new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  bool has_grad() const noexcept { return grad_.has_value(); }
  void enable_grad();
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Throws NumericError naming `where` when any element is NaN/Inf.
  void check_finite(std::string_view where) const;
  bool all_finite() const noexcept;

 private:
  Shape shape_;
  Buffer data_;
  std::optional<Buffer> grad_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace cdk

#endif  // CDK_TENSOR_HPP_
