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

#ifndef CDK_TAIL_HPP_
#define CDK_TAIL_HPP_

#include <Eigen/Dense>
#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "cdk/provenance.hpp"
#include "cdk/rng.hpp"
#include "cdk/scene.hpp"

namespace cdk {

// ---- difficulty ------------------------------------------------------------------

struct KalmanConfig {
  double process_noise = 0.5;      // white-acceleration spectral density, (m/s^2)^2 / Hz
  double measurement_noise = 0.05;  // position std, m
};

/// Constant-velocity Kalman filter over the observed window, rolled forward t_fut steps.
std::vector<Vec2> kalman_cv_forecast(const AgentTrack& track, std::size_t t_fut, double dt,
                                     const KalmanConfig& config = {});
/// Unnormalized difficulty: ADE of the Kalman forecast against the target's future.
double difficulty_score(const Scenario& s, const KalmanConfig& config = {});

// ---- Gaussian mixtures ------------------------------------------------------------

struct GmmModel {
  std::vector<double> weights;
  std::vector<Eigen::VectorXd> means;
  std::vector<Eigen::MatrixXd> covariances;

  std::size_t components() const { return weights.size(); }
  std::size_t dim() const { return means.empty() ? 0 : static_cast<std::size_t>(means[0].size()); }
};

struct GmmFitOptions {
  std::size_t components = 4;
  std::size_t max_iter = 300;
  double tol = 1e-8;  // stop when the per-point log-likelihood gain falls below this
  double reg = 1e-6;  // covariance ridge: reg / n_k added to the diagonal each M-step
};

struct GmmFit {
  GmmModel model;
  // Penalized total log-likelihood at each E-step: LL - reg/2 sum_k tr(Sigma_k^-1).
  std::vector<double> log_likelihood;
  std::size_t iterations = 0;
  bool converged = false;
};

/// EM from a k-means++ seeded start. Rows of `points` are samples.
GmmFit fit_gmm(const Eigen::MatrixXd& points, const GmmFitOptions& options, RngStream& rng);
/// Fits 1..max_components and keeps the lowest BIC.
GmmFit fit_gmm_bic(const Eigen::MatrixXd& points, std::size_t max_components,
                   const GmmFitOptions& options, RngStream& rng);
/// -log sum_k w_k N(x; mu_k, Sigma_k) via log-sum-exp.
double gmm_nll(const GmmModel& model, const Eigen::VectorXd& x);
double gmm_log_likelihood(const GmmModel& model, const Eigen::MatrixXd& points);

// ---- functional PCA -----------------------------------------------------------------

struct FpcaBasis {
  std::size_t length = 0;  // samples per curve
  std::array<Eigen::VectorXd, 2> mean;
  std::array<Eigen::MatrixXd, 2> components;       // length x retained, orthonormal columns
  std::array<Eigen::VectorXd, 2> explained_ratio;  // per retained component, nonincreasing
  std::array<double, 2> total_variance{0.0, 0.0};

  std::size_t retained(std::size_t coord) const {
    return static_cast<std::size_t>(components[coord].cols());
  }
  std::size_t score_dim() const { return retained(0) + retained(1); }
};

/// Per-coordinate FPCA on uniformly sampled curves. Keeps the fewest components
/// reaching `variance_target` of the variance, at most `max_components`.
FpcaBasis fpca_fit(const std::vector<std::vector<Vec2>>& curves, double variance_target = 0.9,
                   std::size_t max_components = 4);
/// Projections on retained components, x coordinate first.
Eigen::VectorXd fpca_scores(const FpcaBasis& basis, const std::vector<Vec2>& curve);
std::vector<Vec2> fpca_reconstruct(const FpcaBasis& basis, const Eigen::VectorXd& scores);

/// Target's observed track followed by its future, in the normalized frame.
std::vector<Vec2> full_trajectory(const Scenario& normalized);

// ---- combination and smoothing ---------------------------------------------------------

struct MinMax {
  double lo = 0.0, hi = 0.0;
  double apply(double v) const;  // clamped to [0, 1]; zero range gives 0
};
MinMax fit_min_max(const std::vector<double>& values);
std::vector<double> normalize(const std::vector<double>& values);

double tail_score(double s_d, double s_r);
double rarity_combine(double s_rs, double s_rt);

struct SmoothingConfig {
  std::size_t bins = 50;
  double sigma = 2.0;  // in bins, kernel truncated at 3 sigma
};

/// Gaussian-smoothed histogram of scores in [0, 1]; edge bins use the
/// in-range kernel mass only. Values are fractions of the corpus per bin.
std::vector<double> smoothed_density(const std::vector<double>& scores, const SmoothingConfig& config);
std::size_t score_bin(double score, std::size_t bins);
/// Inverse smoothed density at each score's bin, rescaled to mean 1.
std::vector<double> smooth_scores(const std::vector<double>& scores, const SmoothingConfig& config);

// ---- full pipeline ------------------------------------------------------------------------

struct TailScore {
  std::string id;
  double s_d = 0.0, s_rs = 0.0, s_rt = 0.0, s_r = 0.0, s = 0.0, s_tilde = 1.0;
};

struct TailConfig {
  KalmanConfig kalman;
  std::size_t gmm_components = 0;  // 0 selects 10 for >= 500 scenarios, else 4
  bool bic = false;                // select component count by BIC up to gmm_components
  std::size_t gmm_max_iter = 300;
  double gmm_tol = 1e-8;
  double gmm_reg = 1e-6;
  double gmm_min_weight = 0.02;  // fewer components are fitted while any weight is below this
  double fpca_variance = 0.9;
  std::size_t fpca_max_components = 4;
  SmoothingConfig smoothing;

  nlohmann::json to_json() const;
  /// Inverse of to_json; every key is required.
  static TailConfig from_json(const nlohmann::json& j);
};

struct TailModels {
  TailConfig config;
  Horizon horizon;
  GmmModel endpoint_gmm, fpc_gmm;
  FpcaBasis basis;
  MinMax sd_range, srs_range, srt_range;
  std::vector<double> density;  // smoothed histogram of training S
  double weight_scale = 1.0;    // makes the training-corpus mean of S_tilde exactly 1
  std::vector<std::vector<double>> em_traces;  // log-likelihood per iteration, both fits
};

struct RawRarity {
  double s_rs, s_rt;
};
RawRarity rarity_raw(const TailModels& models, const Scenario& normalized);

/// Fits every model on `train` (scenarios with futures) and scores them.
TailModels fit_tail_models(const std::vector<Scenario>& train, const TailConfig& config, RngStream& rng,
                           std::vector<TailScore>* train_scores = nullptr);
/// Scores scenarios with already fitted models; normalization uses training ranges.
std::vector<TailScore> score_scenarios(const TailModels& models, const std::vector<Scenario>& corpus);

nlohmann::json models_to_json(const TailModels& models);
TailModels models_from_json(const nlohmann::json& j);
void save_models(const std::filesystem::path& path, const TailModels& models, const Provenance& provenance);
TailModels load_models(const std::filesystem::path& path);

void write_scores_csv(const std::filesystem::path& path, const std::vector<TailScore>& scores,
                      const Provenance& provenance);
std::vector<TailScore> read_scores_csv(const std::filesystem::path& path);

}  // namespace cdk

#endif  // CDK_TAIL_HPP_
