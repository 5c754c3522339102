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

#ifndef CDK_DEVIATION_HPP_
#define CDK_DEVIATION_HPP_

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cdk/scene.hpp"
#include "cdk/tensor.hpp"

namespace cdk {

/// atan2 of the mean unit vector.
double circular_mean(std::span<const double> angles);
/// sqrt(mean(wrap(a - circular_mean)^2)), population divisor.
double circular_std(std::span<const double> angles);
double mean(std::span<const double> xs);
/// Population standard deviation.
double stddev(std::span<const double> xs);

/// Orientation of each displacement vector. Steps without a usable
/// displacement reuse the previous orientation, or the heading if none.
std::vector<double> displacement_orientations(const AgentTrack& track);

using IndividualDescriptor = std::array<double, 6>;
using GroupDescriptor = std::array<double, 2>;

/// [th_t - th_0, th_t - a_0, th_t - a_t, circstd(th), v_t - v_0, std(v)] over
/// the valid steps 0..t. Fewer than two valid steps gives zeros and sets *degenerate.
IndividualDescriptor individual_deviation(const AgentTrack& target, std::size_t t,
                                          bool* degenerate = nullptr);

/// [mean_n(v_n - v_target), circstd_n(th_n)] over neighbors observed at t.
GroupDescriptor group_deviation(const Scenario& s, std::size_t t, bool* degenerate = nullptr);

struct DeviationBundle {
  Tensor individual;  // T_o x 6
  Tensor group;       // T_o x 2
  std::vector<std::uint8_t> individual_degenerate;
  std::vector<std::uint8_t> group_degenerate;
};

DeviationBundle deviation_bundle(const Scenario& s);

/// End-of-window scenario metrics used for cohort comparison. Angles in degrees.
struct ScenarioDeviation {
  double dv_ind = 0.0;     // speed change over the window
  double dh_ind = 0.0;     // heading change over the window
  double sd_v_ind = 0.0;   // speed std over the window
  double sd_h_ind = 0.0;   // heading circular std over the window
  double dv_grp = 0.0;     // mean neighbor-minus-target speed at the last step
  double sd_h_grp = 0.0;   // circular std of target and neighbor headings at the last step
};

inline const std::vector<std::string>& deviation_metric_names() {
  static const std::vector<std::string> kNames{"dV_ind", "dH_ind", "sigma_V_ind",
                                               "sigma_H_ind", "dV_grp", "sigma_H_grp"};
  return kNames;
}

ScenarioDeviation scenario_deviation(const Scenario& s);
std::array<double, 6> as_array(const ScenarioDeviation& d);

struct CohortRow {
  std::string metric;
  double head_mean, head_std, tail_mean, tail_std;
};

/// Bottom-`quantile` (head) and top-`quantile` (tail) indices by score.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> cohort_indices(
    const std::vector<double>& scores, double quantile);

/// Compares the top-`quantile` (tail) and bottom-`quantile` (head) cohorts by
/// score. Each cohort holds ceil(quantile * n) scenarios; ties keep corpus order.
std::vector<CohortRow> cohort_stats(const std::vector<Scenario>& corpus,
                                    const std::vector<double>& scores, double quantile);

void write_cohort_csv(const std::filesystem::path& path, const std::vector<CohortRow>& rows,
                      const Provenance& provenance);

}  // namespace cdk

#endif  // CDK_DEVIATION_HPP_
