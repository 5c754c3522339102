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

#include "cdk/deviation.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <fstream>
#include <numbers>
#include <numeric>

namespace cdk {

double circular_mean(std::span<const double> angles) {
  double s = 0.0, c = 0.0;
  for (double a : angles) {
    s += std::sin(a);
    c += std::cos(a);
  }
  return std::atan2(s, c);
}

namespace {

bool all_equal(std::span<const double> xs) {
  return std::adjacent_find(xs.begin(), xs.end(), std::not_equal_to<>()) == xs.end();
}

}  // namespace

double circular_std(std::span<const double> angles) {
  if (all_equal(angles)) return 0.0;
  const double mu = circular_mean(angles);
  double acc = 0.0;
  for (double a : angles) {
    const double d = wrap_angle(a - mu);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(angles.size()));
}

double mean(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double stddev(std::span<const double> xs) {
  if (all_equal(xs)) return 0.0;
  const double mu = mean(xs);
  double acc = 0.0;
  for (double x : xs) acc += (x - mu) * (x - mu);
  return std::sqrt(acc / static_cast<double>(xs.size()));
}

namespace {

bool has_displacement(const AgentTrack& a, std::size_t t) {
  return t >= 1 && a.mask[t] && a.mask[t - 1] &&
         (a.displacements[t].x != 0.0 || a.displacements[t].y != 0.0);
}

double to_degrees(double rad) { return rad * 180.0 / std::numbers::pi; }

}  // namespace

std::vector<double> displacement_orientations(const AgentTrack& track) {
  std::vector<double> alpha(track.positions.size());
  bool seen = false;
  for (std::size_t t = 0; t < alpha.size(); ++t) {
    if (has_displacement(track, t)) {
      alpha[t] = std::atan2(track.displacements[t].y, track.displacements[t].x);
      seen = true;
    } else {
      alpha[t] = seen ? alpha[t - 1] : track.headings[t];
    }
  }
  return alpha;
}

IndividualDescriptor individual_deviation(const AgentTrack& target, std::size_t t,
                                          bool* degenerate) {
  if (t >= target.positions.size()) throw ValidationError("individual_deviation: step out of range");
  std::vector<double> th, v;
  std::size_t first = t + 1;
  for (std::size_t s = 0; s <= t; ++s) {
    if (!target.mask[s]) continue;
    if (first > t) first = s;
    th.push_back(target.headings[s]);
    v.push_back(target.velocities[s]);
  }
  if (degenerate) *degenerate = th.size() < 2;
  if (th.size() < 2) return {};

  const std::vector<double> alpha = displacement_orientations(target);
  double alpha0 = target.headings[first];
  for (std::size_t s = first + 1; s <= t; ++s) {
    if (has_displacement(target, s)) {
      alpha0 = alpha[s];
      break;
    }
  }
  const double theta_t = target.headings[t];
  return {wrap_angle(theta_t - target.headings[first]),
          wrap_angle(theta_t - alpha0),
          wrap_angle(theta_t - alpha[t]),
          circular_std(th),
          target.velocities[t] - target.velocities[first],
          stddev(v)};
}

GroupDescriptor group_deviation(const Scenario& s, std::size_t t, bool* degenerate) {
  const std::size_t ti = s.target_index();
  const AgentTrack& tgt = s.agents[ti];
  if (t >= tgt.positions.size()) throw ValidationError("group_deviation: step out of range");
  std::vector<double> dv, heading;
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    if (i == ti || !s.agents[i].mask[t]) continue;
    dv.push_back(s.agents[i].velocities[t] - tgt.velocities[t]);
    heading.push_back(s.agents[i].headings[t]);
  }
  if (degenerate) *degenerate = dv.empty();
  if (dv.empty()) return {};
  return {mean(dv), circular_std(heading)};
}

DeviationBundle deviation_bundle(const Scenario& s) {
  const std::size_t to = s.horizon.t_obs;
  DeviationBundle b{Tensor({to, 6}), Tensor({to, 2}), std::vector<std::uint8_t>(to),
                    std::vector<std::uint8_t>(to)};
  const AgentTrack& tgt = s.target();
  for (std::size_t t = 0; t < to; ++t) {
    bool di = false, dg = false;
    const auto ind = individual_deviation(tgt, t, &di);
    const auto grp = group_deviation(s, t, &dg);
    for (std::size_t k = 0; k < 6; ++k) b.individual.at(t, k) = ind[k];
    for (std::size_t k = 0; k < 2; ++k) b.group.at(t, k) = grp[k];
    b.individual_degenerate[t] = di;
    b.group_degenerate[t] = dg;
  }
  return b;
}

ScenarioDeviation scenario_deviation(const Scenario& s) {
  const std::size_t last = s.horizon.t_obs - 1;
  const AgentTrack& tgt = s.target();
  const auto ind = individual_deviation(tgt, last);
  const auto grp = group_deviation(s, last);
  std::vector<double> headings{tgt.headings[last]};
  for (std::size_t i = 0; i < s.agents.size(); ++i)
    if (i != s.target_index() && s.agents[i].mask[last]) headings.push_back(s.agents[i].headings[last]);
  ScenarioDeviation d;
  d.dv_ind = ind[4];
  d.dh_ind = to_degrees(ind[0]);
  d.sd_v_ind = ind[5];
  d.sd_h_ind = to_degrees(ind[3]);
  d.dv_grp = grp[0];
  d.sd_h_grp = to_degrees(circular_std(headings));
  return d;
}

std::array<double, 6> as_array(const ScenarioDeviation& d) {
  return {d.dv_ind, d.dh_ind, d.sd_v_ind, d.sd_h_ind, d.dv_grp, d.sd_h_grp};
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> cohort_indices(
    const std::vector<double>& scores, double quantile) {
  if (!(quantile > 0.0 && quantile <= 1.0)) throw ValidationError("cohort quantile must be in (0, 1]");
  const auto size = static_cast<std::size_t>(
      std::ceil(quantile * static_cast<double>(scores.size()) - 1e-9));
  if (size == 0) throw ValidationError("quantile cohort is empty");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  std::vector<std::size_t> head(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(size));
  std::vector<std::size_t> tail(order.end() - static_cast<std::ptrdiff_t>(size), order.end());
  std::reverse(tail.begin(), tail.end());
  return {head, tail};
}

std::vector<CohortRow> cohort_stats(const std::vector<Scenario>& corpus,
                                    const std::vector<double>& scores, double quantile) {
  if (scores.size() != corpus.size())
    throw ValidationError("cohort_stats: " + std::to_string(scores.size()) + " scores for " +
                          std::to_string(corpus.size()) + " scenarios");
  const auto [head_idx, tail_idx] = cohort_indices(scores, quantile);
  std::vector<std::array<double, 6>> metrics;
  metrics.reserve(corpus.size());
  for (const auto& s : corpus) metrics.push_back(as_array(scenario_deviation(s)));

  std::vector<CohortRow> rows;
  for (std::size_t m = 0; m < 6; ++m) {
    std::vector<double> head, tail;
    for (auto i : head_idx) head.push_back(metrics[i][m]);
    for (auto i : tail_idx) tail.push_back(metrics[i][m]);
    rows.push_back({deviation_metric_names()[m], mean(head), stddev(head), mean(tail), stddev(tail)});
  }
  return rows;
}

void write_cohort_csv(const std::filesystem::path& path, const std::vector<CohortRow>& rows,
                      const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << provenance.csv_comment() << '\n' << "metric,head_mean,head_std,tail_mean,tail_std\n";
  for (const auto& r : rows) {
    out << r.metric << ',' << format_double(r.head_mean) << ',' << format_double(r.head_std) << ','
        << format_double(r.tail_mean) << ',' << format_double(r.tail_std) << '\n';
  }
}

}  // namespace cdk
