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

#include "cdk/grad_check.hpp"

#include <algorithm>
#include <cmath>

namespace cdk {
namespace {

double eval_scalar(const std::function<Var(Tape&)>& f) {
  Tape tape;
  const Var out = f(tape);
  const double v = out.value().item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite loss");
  return v;
}

}  // namespace

GradCheckResult grad_check(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& targets,
                           const GradCheckOptions& options) {
  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    const Var out = f(tape);
    if (!std::isfinite(out.value().item())) throw NumericError("grad_check: non-finite loss");
    tape.backward(out);
    for (const Tensor* t : targets) {
      auto g = tape.param_grad(*t);
      analytic.emplace_back(g.begin(), g.end());
      analytic.back().resize(t->size(), 0.0);
    }
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = 0; j < targets[i]->size(); ++j) coords.emplace_back(i, j);
  if (options.max_coords > 0 && options.max_coords < coords.size()) {
    RngStream rng(options.seed);
    for (std::size_t i = 0; i < options.max_coords; ++i) {
      const std::size_t j = i + rng.below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(options.max_coords);
  }

  GradCheckResult result;
  for (auto [ti, j] : coords) {
    double& x = (*targets[ti])[j];
    const double saved = x;
    x = saved + options.step;
    const double up = eval_scalar(f);
    x = saved - options.step;
    const double down = eval_scalar(f);
    x = saved;
    const double numeric = (up - down) / (2.0 * options.step);
    const double a = analytic[ti][j];
    const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
    result.max_rel_error = std::max(result.max_rel_error, err);
    ++result.coords_checked;
  }
  return result;
}

}  // namespace cdk
