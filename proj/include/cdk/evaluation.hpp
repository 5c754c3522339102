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

#ifndef CDK_EVALUATION_HPP_
#define CDK_EVALUATION_HPP_

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cdk/model.hpp"
#include "cdk/tail.hpp"

namespace cdk {

/// kAveraged: minFDE + (1/K) sum_k (p_hat_k - p_k)^2 with p one-hot at the FDE
/// winner. kConventional: minFDE + (1 - p_hat_winner)^2.
enum class BrierConvention { kAveraged, kConventional };

struct DisplacementMetrics {
  double min_ade = 0.0, min_fde = 0.0, b_min_fde = 0.0;
  bool miss = false;
  std::size_t winner = 0;  // FDE-minimizing candidate
};

DisplacementMetrics displacement_metrics(const PredictionSet& pred, const std::vector<Vec2>& gt,
                                         double miss_threshold = 2.0,
                                         BrierConvention convention = BrierConvention::kAveraged);

/// Mean of every value at or above sorted[floor(alpha * n / 100)].
double cvar(const std::vector<double>& errors, double alpha_percent);

struct SliceRow {
  std::string slice;
  std::size_t count = 0;
  double min_ade = 0.0, min_fde = 0.0, b_min_fde = 0.0, miss_rate = 0.0;
};

struct FeatureBinRow {
  std::string feature;
  std::size_t bin = 0, count = 0;
  double median_feature = 0.0, mean_metric = 0.0, std_error = 0.0;
};

struct CvarRow {
  double alpha = 0.0, value = 0.0;
};

struct MetricsReport {
  std::vector<SliceRow> slices;
  std::vector<FeatureBinRow> feature_bins;  // minADE per quantile bin of each deviation metric
  std::vector<CvarRow> cvar;               // CVaR of minFDE
};

struct ReportOptions {
  std::vector<double> top_percents{10.0, 5.0};  // tail slices; need scores
  std::size_t feature_bins = 5;
  std::vector<double> cvar_alphas{90, 91, 92, 93, 94, 95, 96, 97, 98, 99};
  double miss_threshold = 2.0;
  BrierConvention convention = BrierConvention::kAveraged;
};

/// Aggregates one slice; throws on an empty slice.
SliceRow aggregate(const std::string& name, const std::vector<DisplacementMetrics>& metrics,
                   const std::vector<std::size_t>& members);

/// Indices of the ceil(percent * n / 100) highest-S scenarios, ties in input order.
std::vector<std::size_t> top_tail(const std::vector<double>& s, double percent);

/// Equal-count quantile bins of `values` (stable order); bin b holds sorted
/// positions [b*n/bins, (b+1)*n/bins).
std::vector<std::vector<std::size_t>> quantile_bins(const std::vector<double>& values, std::size_t bins);

/**
 * Scores predictions against the corpus futures. `scores` enables the tail
 * slices; without it only "all" is reported. The feature report is skipped
 * when the corpus has fewer scenarios than bins.
 */
MetricsReport sliced_report(const std::vector<Scenario>& corpus, const std::vector<PredictionSet>& predictions,
                            const std::optional<std::vector<TailScore>>& scores, const ReportOptions& options = {});

void write_report_csv(const std::filesystem::path& dir, const MetricsReport& report, const Provenance& provenance);
void print_report(std::ostream& os, const MetricsReport& report);

}  // namespace cdk

#endif  // CDK_EVALUATION_HPP_
