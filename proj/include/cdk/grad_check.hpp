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

#ifndef CDK_GRAD_CHECK_HPP_
#define CDK_GRAD_CHECK_HPP_

#include <cstdint>
#include <functional>
#include <vector>

#include "cdk/autodiff.hpp"

namespace cdk {

struct GradCheckOptions {
  double step = 1e-5;
  /// 0 checks every coordinate; otherwise this many sampled coordinates.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
};

/**
 * Compares reverse-mode gradients against central differences.
 *
 * `f` must build a scalar on the given tape and register every tensor in
 * `targets` through Tape::param. Targets are perturbed in place and restored.
 * The error per coordinate is |analytic - numeric| / max(1, |analytic|).
 */
GradCheckResult grad_check(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& targets,
                           const GradCheckOptions& options = {});

}  // namespace cdk

#endif  // CDK_GRAD_CHECK_HPP_
