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

#include "cdk/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <unordered_map>

#include "cdk/deviation.hpp"

namespace cdk {

DisplacementMetrics displacement_metrics(const PredictionSet& pred, const std::vector<Vec2>& gt, double miss_threshold,
                                         BrierConvention convention) {
  const std::size_t k = pred.trajectories.size();
  if (k == 0) throw ValidationError("scenario " + pred.id + ": no candidate trajectories");
  if (pred.probs.size() != k)
    throw ValidationError("scenario " + pred.id + ": " + std::to_string(k) + " trajectories but " +
                          std::to_string(pred.probs.size()) + " probabilities");
  if (gt.empty()) throw ValidationError("scenario " + pred.id + ": missing ground-truth future");
  const std::size_t tf = gt.size();
  DisplacementMetrics m;
  for (std::size_t c = 0; c < k; ++c) {
    const auto& traj = pred.trajectories[c];
    if (traj.size() != tf)
      throw ValidationError("scenario " + pred.id + ": candidate length differs from the ground truth");
    double sum = 0.0;
    for (std::size_t t = 0; t < tf; ++t) sum += distance(traj[t], gt[t]);
    const double ade = sum / static_cast<double>(tf), fde = distance(traj.back(), gt.back());
    if (c == 0 || ade < m.min_ade) m.min_ade = ade;
    if (c == 0 || fde < m.min_fde) {
      m.min_fde = fde;
      m.winner = c;
    }
  }
  double penalty = 0.0;
  if (convention == BrierConvention::kAveraged) {
    for (std::size_t c = 0; c < k; ++c) {
      const double e = pred.probs[c] - (c == m.winner ? 1.0 : 0.0);
      penalty += e * e;
    }
    penalty /= static_cast<double>(k);
  } else {
    penalty = (1.0 - pred.probs[m.winner]) * (1.0 - pred.probs[m.winner]);
  }
  m.b_min_fde = m.min_fde + penalty;
  m.miss = m.min_fde > miss_threshold;
  return m;
}

double cvar(const std::vector<double>& errors, double alpha_percent) {
  if (errors.empty()) throw ValidationError("cvar: empty error list");
  if (!(alpha_percent > 0.0 && alpha_percent < 100.0)) throw ValidationError("cvar: alpha must lie in (0, 100)");
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  const auto rank = std::min(n - 1, static_cast<std::size_t>(std::floor(alpha_percent * static_cast<double>(n) / 100.0)));
  const auto first = std::lower_bound(sorted.begin(), sorted.end(), sorted[rank]);
  return std::accumulate(first, sorted.end(), 0.0) / static_cast<double>(sorted.end() - first);
}

SliceRow aggregate(const std::string& name, const std::vector<DisplacementMetrics>& metrics,
                   const std::vector<std::size_t>& members) {
  if (members.empty()) throw ValidationError("slice '" + name + "' contains no scenarios");
  SliceRow r;
  r.slice = name;
  r.count = members.size();
  for (std::size_t i : members) {
    const auto& m = metrics.at(i);
    r.min_ade += m.min_ade;
    r.min_fde += m.min_fde;
    r.b_min_fde += m.b_min_fde;
    r.miss_rate += m.miss ? 1.0 : 0.0;
  }
  const double inv = 1.0 / static_cast<double>(r.count);
  r.min_ade *= inv;
  r.min_fde *= inv;
  r.b_min_fde *= inv;
  r.miss_rate *= inv;
  return r;
}

std::vector<std::size_t> top_tail(const std::vector<double>& s, double percent) {
  if (!(percent > 0.0 && percent <= 100.0)) throw ValidationError("tail slice percent must lie in (0, 100]");
  std::vector<std::size_t> idx(s.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  const auto count = static_cast<std::size_t>(std::ceil(percent * static_cast<double>(s.size()) / 100.0 - 1e-9));
  idx.resize(std::min(count, idx.size()));
  return idx;
}

std::vector<std::vector<std::size_t>> quantile_bins(const std::vector<double>& values, std::size_t bins) {
  if (bins == 0 || values.size() < bins) throw ValidationError("quantile_bins: need at least one scenario per bin");
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  const std::size_t n = values.size();
  std::vector<std::vector<std::size_t>> out(bins);
  for (std::size_t b = 0; b < bins; ++b) out[b].assign(idx.begin() + b * n / bins, idx.begin() + (b + 1) * n / bins);
  return out;
}

namespace {

std::string percent_label(double p) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "top-%g%%", p);
  return buf;
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

MetricsReport sliced_report(const std::vector<Scenario>& corpus, const std::vector<PredictionSet>& predictions,
                            const std::optional<std::vector<TailScore>>& scores, const ReportOptions& options) {
  if (corpus.empty()) throw ValidationError("evaluation corpus is empty");
  std::unordered_map<std::string, const PredictionSet*> by_id;
  for (const auto& p : predictions) by_id[p.id] = &p;
  std::vector<DisplacementMetrics> metrics;
  std::vector<double> fde;
  for (const auto& s : corpus) {
    const auto it = by_id.find(s.id);
    if (it == by_id.end()) throw ValidationError("predictions have no entry for scenario '" + s.id + "'");
    metrics.push_back(displacement_metrics(*it->second, s.future, options.miss_threshold, options.convention));
    fde.push_back(metrics.back().min_fde);
  }
  MetricsReport report;
  std::vector<std::size_t> all(corpus.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  report.slices.push_back(aggregate("all", metrics, all));
  if (scores) {
    std::unordered_map<std::string, double> s_by_id;
    for (const auto& s : *scores) s_by_id[s.id] = s.s;
    std::vector<double> s;
    for (const auto& sc : corpus) {
      const auto it = s_by_id.find(sc.id);
      if (it == s_by_id.end()) throw ValidationError("scores file has no entry for scenario '" + sc.id + "'");
      s.push_back(it->second);
    }
    for (double p : options.top_percents) report.slices.push_back(aggregate(percent_label(p), metrics, top_tail(s, p)));
  }
  if (options.feature_bins > 0 && corpus.size() >= options.feature_bins) {
    std::vector<std::array<double, 6>> features;
    for (const auto& s : corpus) features.push_back(as_array(scenario_deviation(s)));
    const auto& names = deviation_metric_names();
    for (std::size_t f = 0; f < names.size(); ++f) {
      std::vector<double> values;
      for (const auto& row : features) values.push_back(row[f]);
      const auto bins = quantile_bins(values, options.feature_bins);
      for (std::size_t b = 0; b < bins.size(); ++b) {
        FeatureBinRow r;
        r.feature = names[f];
        r.bin = b;
        r.count = bins[b].size();
        std::vector<double> fv, ade;
        for (std::size_t i : bins[b]) {
          fv.push_back(values[i]);
          ade.push_back(metrics[i].min_ade);
        }
        r.median_feature = median_of(fv);
        r.mean_metric = std::accumulate(ade.begin(), ade.end(), 0.0) / static_cast<double>(ade.size());
        if (ade.size() > 1) {
          double ss = 0.0;
          for (double a : ade) ss += (a - r.mean_metric) * (a - r.mean_metric);
          r.std_error = std::sqrt(ss / static_cast<double>(ade.size() - 1)) / std::sqrt(static_cast<double>(ade.size()));
        }
        report.feature_bins.push_back(r);
      }
    }
  }
  for (double a : options.cvar_alphas) report.cvar.push_back({a, cvar(fde, a)});
  return report;
}

void write_report_csv(const std::filesystem::path& dir, const MetricsReport& report, const Provenance& provenance) {
  std::filesystem::create_directories(dir);
  auto open = [&](const char* name) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
    out << provenance.csv_comment() << '\n';
    return out;
  };
  {
    auto out = open("metrics.csv");
    out << "slice,count,minADE_6,minFDE_6,b_minFDE_6,MR_6\n";
    for (const auto& r : report.slices)
      out << r.slice << ',' << r.count << ',' << format_double(r.min_ade, 17) << ',' << format_double(r.min_fde, 17)
          << ',' << format_double(r.b_min_fde, 17) << ',' << format_double(r.miss_rate, 17) << '\n';
  }
  {
    auto out = open("feature_bins.csv");
    out << "feature,bin,count,median_feature,mean_minADE_6,std_error\n";
    for (const auto& r : report.feature_bins)
      out << r.feature << ',' << r.bin << ',' << r.count << ',' << format_double(r.median_feature, 17) << ','
          << format_double(r.mean_metric, 17) << ',' << format_double(r.std_error, 17) << '\n';
  }
  {
    auto out = open("cvar.csv");
    out << "alpha,cvar_minFDE_6\n";
    for (const auto& r : report.cvar) out << format_double(r.alpha, 17) << ',' << format_double(r.value, 17) << '\n';
  }
}

void print_report(std::ostream& os, const MetricsReport& report) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-10s %7s %10s %10s %11s %7s\n", "slice", "count", "minADE_6", "minFDE_6",
                "b-minFDE_6", "MR_6");
  os << buf;
  for (const auto& r : report.slices) {
    std::snprintf(buf, sizeof(buf), "%-10s %7zu %10.4f %10.4f %11.4f %7.4f\n", r.slice.c_str(), r.count, r.min_ade,
                  r.min_fde, r.b_min_fde, r.miss_rate);
    os << buf;
  }
  if (!report.cvar.empty()) {
    os << "\nCVaR(minFDE_6)\n";
    for (const auto& r : report.cvar) {
      std::snprintf(buf, sizeof(buf), "  alpha %5.1f  %10.4f\n", r.alpha, r.value);
      os << buf;
    }
  }
  if (!report.feature_bins.empty()) {
    os << "\nminADE_6 by deviation-feature quantile bin (mean +- SE)\n";
    for (const auto& r : report.feature_bins) {
      std::snprintf(buf, sizeof(buf), "  %-12s bin %zu  n=%-5zu median %10.4f  %8.4f +- %.4f\n", r.feature.c_str(),
                    r.bin, r.count, r.median_feature, r.mean_metric, r.std_error);
      os << buf;
    }
  }
}

}  // namespace cdk
