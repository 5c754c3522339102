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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "cdk/evaluation.hpp"

namespace cdk {
namespace {

PredictionSet random_prediction(std::size_t k, std::size_t tf, RngStream& rng) {
  PredictionSet p;
  p.id = "x";
  p.trajectories.assign(k, std::vector<Vec2>(tf));
  for (auto& traj : p.trajectories)
    for (auto& v : traj) v = {rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)};
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += p.probs.emplace_back(rng.uniform(0.01, 1.0));
  for (double& v : p.probs) v /= total;
  return p;
}

// Brute force: materialize the K x T_f distance table, then read every metric off it.
struct Oracle {
  double ade, fde, b_avg, b_conv;
  bool miss;
};

Oracle brute_force(const PredictionSet& p, const std::vector<Vec2>& gt) {
  const std::size_t k = p.trajectories.size(), tf = gt.size();
  std::vector<std::vector<double>> dist(k, std::vector<double>(tf));
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t t = 0; t < tf; ++t)
      dist[c][t] = std::sqrt((p.trajectories[c][t].x - gt[t].x) * (p.trajectories[c][t].x - gt[t].x) +
                             (p.trajectories[c][t].y - gt[t].y) * (p.trajectories[c][t].y - gt[t].y));
  std::vector<double> ades, fdes;
  for (const auto& row : dist) {
    ades.push_back(std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(tf));
    fdes.push_back(row.back());
  }
  const auto w = static_cast<std::size_t>(std::min_element(fdes.begin(), fdes.end()) - fdes.begin());
  Oracle o{};
  o.ade = *std::min_element(ades.begin(), ades.end());
  o.fde = fdes[w];
  double pen = 0.0;
  for (std::size_t c = 0; c < k; ++c) pen += std::pow(p.probs[c] - (c == w ? 1.0 : 0.0), 2);
  o.b_avg = o.fde + pen / static_cast<double>(k);
  o.b_conv = o.fde + std::pow(1.0 - p.probs[w], 2);
  o.miss = std::none_of(fdes.begin(), fdes.end(), [](double f) { return f <= 2.0; });
  return o;
}

double brute_cvar(const std::vector<double>& e, double alpha) {
  // Threshold by counting: the smallest value v with #{x < v} > floor(alpha*n/100) - 1.
  const std::size_t n = e.size();
  const auto rank = std::min(n - 1, static_cast<std::size_t>(std::floor(alpha * static_cast<double>(n) / 100.0)));
  double thr = 0.0;
  for (double v : e) {
    std::size_t below = 0;
    for (double x : e) below += x < v ? 1 : 0;
    std::size_t at_most = 0;
    for (double x : e) at_most += x <= v ? 1 : 0;
    if (below <= rank && rank < at_most) thr = v;
  }
  double sum = 0.0;
  std::size_t count = 0;
  for (double x : e)
    if (x >= thr) {
      sum += x;
      ++count;
    }
  return sum / static_cast<double>(count);
}

TEST(DisplacementMetrics, MatchesBruteForceOnRandomCases) {
  RngStream rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 1 + rng.below(6), tf = 1 + rng.below(8);
    const PredictionSet p = random_prediction(k, tf, rng);
    std::vector<Vec2> gt(tf);
    for (auto& v : gt) v = {rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)};
    const Oracle o = brute_force(p, gt);
    const DisplacementMetrics m = displacement_metrics(p, gt);
    EXPECT_NEAR(m.min_ade, o.ade, 1e-12);
    EXPECT_NEAR(m.min_fde, o.fde, 1e-12);
    EXPECT_NEAR(m.b_min_fde, o.b_avg, 1e-12);
    EXPECT_EQ(m.miss, o.miss);
    EXPECT_NEAR(displacement_metrics(p, gt, 2.0, BrierConvention::kConventional).b_min_fde, o.b_conv, 1e-12);
    EXPECT_LE(m.min_fde, m.b_min_fde);
    if (!m.miss) EXPECT_LE(m.min_fde, 2.0);
  }
}

TEST(DisplacementMetrics, Examples) {
  PredictionSet p;
  p.id = "e";
  const std::vector<Vec2> gt{{1, 0}, {2, 0}, {3, 0}};
  p.trajectories = {{{0, 5}, {0, 5}, {0, 5}}, gt};
  p.probs = {0.0, 1.0};
  const auto exact = displacement_metrics(p, gt);
  EXPECT_EQ(exact.min_ade, 0.0);
  EXPECT_EQ(exact.min_fde, 0.0);
  EXPECT_EQ(exact.b_min_fde, 0.0);
  EXPECT_FALSE(exact.miss);

  p.trajectories = {{{1, 3}, {2, 3}, {3, 3}}, {{1, -3}, {2, -3}, {3, -3}}};
  p.probs = {0.5, 0.5};
  EXPECT_TRUE(displacement_metrics(p, gt).miss);  // both endpoints 3 m away

  p.trajectories = {{{1, 1}, {2, 1}, {3, 1}}, {{1, -3}, {2, -3}, {3, -3}}};
  EXPECT_DOUBLE_EQ(displacement_metrics(p, gt).b_min_fde, 1.25);
  EXPECT_DOUBLE_EQ(displacement_metrics(p, gt, 2.0, BrierConvention::kConventional).b_min_fde, 1.25);

  p.probs = {0.5};
  EXPECT_THROW(displacement_metrics(p, gt), ValidationError);
  p.probs = {0.5, 0.5};
  EXPECT_THROW(displacement_metrics(p, {}), ValidationError);
}

TEST(DisplacementMetrics, InvariantUnderRigidTransforms) {
  RngStream rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    PredictionSet p = random_prediction(6, 5, rng);
    std::vector<Vec2> gt(5);
    for (auto& v : gt) v = {rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)};
    const auto base = displacement_metrics(p, gt);
    const double a = rng.uniform(-3.0, 3.0), c = std::cos(a), s = std::sin(a);
    const Vec2 shift{rng.normal(0.0, 100.0), rng.normal(0.0, 100.0)};
    auto move = [&](Vec2 v) { return Vec2{c * v.x - s * v.y + shift.x, s * v.x + c * v.y + shift.y}; };
    for (auto& traj : p.trajectories)
      for (auto& v : traj) v = move(v);
    for (auto& v : gt) v = move(v);
    const auto moved = displacement_metrics(p, gt);
    EXPECT_NEAR(moved.min_ade, base.min_ade, 1e-9);
    EXPECT_NEAR(moved.min_fde, base.min_fde, 1e-9);
    EXPECT_NEAR(moved.b_min_fde, base.b_min_fde, 1e-9);
  }
}

TEST(Cvar, Examples) {
  std::vector<double> e(100);
  std::iota(e.begin(), e.end(), 1.0);
  EXPECT_DOUBLE_EQ(cvar(e, 90), 95.5);
  EXPECT_EQ(cvar(std::vector<double>(17, 2.5), 93), 2.5);
  EXPECT_DOUBLE_EQ(cvar(e, 1e-9), 50.5);  // alpha -> 0 gives the mean
  EXPECT_EQ(cvar(e, 99.999), 100.0);      // alpha -> 100 gives the max
  EXPECT_THROW(cvar({}, 90), ValidationError);
  EXPECT_THROW(cvar(e, 0.0), ValidationError);
  EXPECT_THROW(cvar(e, 100.0), ValidationError);
}

TEST(Cvar, MatchesBruteForceAndIsMonotone) {
  RngStream rng(8);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> e(1 + rng.below(40));
    for (auto& v : e) v = rng.below(3) == 0 ? std::floor(rng.uniform(0.0, 5.0)) : rng.uniform(0.0, 10.0);  // ties
    double prev = -1.0;
    for (int a = 90; a <= 99; ++a) {
      const double v = cvar(e, a);
      EXPECT_NEAR(v, brute_cvar(e, a), 1e-12);
      EXPECT_GE(v, prev);
      prev = v;
    }
  }
}

TEST(Slicing, TopTailAndQuantileBins) {
  std::vector<double> s(100);
  RngStream rng(5);
  for (auto& v : s) v = rng.uniform();
  const auto top = top_tail(s, 10.0);
  ASSERT_EQ(top.size(), 10u);
  std::vector<double> sorted = s;
  std::sort(sorted.rbegin(), sorted.rend());
  for (std::size_t i : top) EXPECT_GE(s[i], sorted[9]);
  EXPECT_EQ(top_tail(s, 5.0).size(), 5u);
  EXPECT_EQ(top_tail(std::vector<double>(8, 0.0), 10.0).size(), 1u);

  const auto bins = quantile_bins(s, 5);
  ASSERT_EQ(bins.size(), 5u);
  for (const auto& b : bins) EXPECT_EQ(b.size(), 20u);
  for (std::size_t b = 0; b + 1 < 5; ++b) {
    double hi = -1.0, lo = 2.0;
    for (std::size_t i : bins[b]) hi = std::max(hi, s[i]);
    for (std::size_t i : bins[b + 1]) lo = std::min(lo, s[i]);
    EXPECT_LE(hi, lo);
  }
  EXPECT_THROW(quantile_bins({1.0, 2.0}, 5), ValidationError);
  EXPECT_THROW(aggregate("empty", {}, {}), ValidationError);
}

class ReportTest : public ::testing::Test {
 protected:
  ReportTest() {
    RngStream gen(7);
    corpus_ = generate_synthetic(40, 0.25, gen);
    RngStream rng(9);
    for (const auto& s : corpus_) {
      PredictionSet p = random_prediction(6, s.future.size(), rng);
      p.id = s.id;
      for (auto& traj : p.trajectories)
        for (std::size_t t = 0; t < traj.size(); ++t) traj[t] = {s.future[t].x + traj[t].x, s.future[t].y + traj[t].y};
      preds_.push_back(p);
      TailScore ts;
      ts.id = s.id;
      ts.s = rng.uniform();
      scores_.push_back(ts);
    }
  }
  std::vector<Scenario> corpus_;
  std::vector<PredictionSet> preds_;
  std::vector<TailScore> scores_;
};

TEST_F(ReportTest, SlicesMatchDirectAggregation) {
  const MetricsReport r = sliced_report(corpus_, preds_, scores_);
  ASSERT_EQ(r.slices.size(), 3u);
  EXPECT_EQ(r.slices[0].slice, "all");
  EXPECT_EQ(r.slices[0].count, 40u);
  EXPECT_EQ(r.slices[1].slice, "top-10%");
  EXPECT_EQ(r.slices[1].count, 4u);
  EXPECT_EQ(r.slices[2].count, 2u);
  std::vector<std::size_t> order(40);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores_[a].s > scores_[b].s; });
  double ade = 0.0, miss = 0.0;
  for (std::size_t j = 0; j < 4; ++j) {
    const auto m = displacement_metrics(preds_[order[j]], corpus_[order[j]].future);
    ade += m.min_ade / 4.0;
    miss += m.miss ? 0.25 : 0.0;
  }
  EXPECT_NEAR(r.slices[1].min_ade, ade, 1e-12);
  EXPECT_NEAR(r.slices[1].miss_rate, miss, 1e-12);
  for (const auto& row : r.slices) {
    EXPECT_GE(row.min_ade, 0.0);
    EXPECT_GE(row.miss_rate, 0.0);
    EXPECT_LE(row.miss_rate, 1.0);
    EXPECT_LE(row.min_fde, row.b_min_fde);
  }
  EXPECT_EQ(r.feature_bins.size(), 6u * 5u);
  std::size_t counted = 0;
  for (const auto& b : r.feature_bins) counted += b.count;
  EXPECT_EQ(counted, 6u * 40u);
  EXPECT_EQ(r.cvar.size(), 10u);
}

TEST_F(ReportTest, WithoutScoresOnlyAllIsReported) {
  const MetricsReport r = sliced_report(corpus_, preds_, std::nullopt);
  ASSERT_EQ(r.slices.size(), 1u);
  EXPECT_EQ(r.slices[0].slice, "all");
}

TEST_F(ReportTest, SingleScenarioReportEqualsItsMetrics) {
  const std::vector<Scenario> one{corpus_[3]};
  const MetricsReport r = sliced_report(one, preds_, std::nullopt);
  const auto m = displacement_metrics(preds_[3], corpus_[3].future);
  EXPECT_EQ(r.slices[0].min_ade, m.min_ade);
  EXPECT_EQ(r.slices[0].min_fde, m.min_fde);
  EXPECT_EQ(r.slices[0].b_min_fde, m.b_min_fde);
  EXPECT_EQ(r.slices[0].miss_rate, m.miss ? 1.0 : 0.0);
  EXPECT_TRUE(r.feature_bins.empty());
}

TEST_F(ReportTest, MissingPredictionsAreRejected) {
  std::vector<PredictionSet> partial(preds_.begin(), preds_.end() - 1);
  EXPECT_THROW(sliced_report(corpus_, partial, std::nullopt), ValidationError);
  std::vector<TailScore> fewer(scores_.begin() + 1, scores_.end());
  EXPECT_THROW(sliced_report(corpus_, preds_, fewer), ValidationError);
}

TEST_F(ReportTest, PrintsATable) {
  std::ostringstream os;
  print_report(os, sliced_report(corpus_, preds_, scores_));
  EXPECT_NE(os.str().find("top-5%"), std::string::npos);
  EXPECT_NE(os.str().find("CVaR"), std::string::npos);
}

}  // namespace
}  // namespace cdk
