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

#include "cdk/tail.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <sstream>

#include "cdk/tensor.hpp"

namespace cdk {

using nlohmann::json;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---- difficulty ------------------------------------------------------------------

std::vector<Vec2> kalman_cv_forecast(const AgentTrack& track, std::size_t t_fut, double dt,
                                     const KalmanConfig& config) {
  const std::size_t n = track.positions.size();
  std::size_t t0 = 0;
  while (t0 < n && !track.mask[t0]) ++t0;
  if (t0 == n) throw ValidationError("kalman_cv_forecast: track has no observed step");

  Eigen::Vector4d x;
  x << track.positions[t0].x, track.positions[t0].y, 0.0, 0.0;
  for (std::size_t s = t0 + 1; s < n; ++s) {
    if (track.mask[s] && track.mask[s - 1]) {
      x(2) = track.displacements[s].x / dt;
      x(3) = track.displacements[s].y / dt;
      break;
    }
  }
  const double r2 = config.measurement_noise * config.measurement_noise;
  Eigen::Matrix4d p = Eigen::Vector4d(r2, r2, 1.0, 1.0).asDiagonal();
  Eigen::Matrix4d f = Eigen::Matrix4d::Identity();
  f(0, 2) = f(1, 3) = dt;
  const double q = config.process_noise;
  Eigen::Matrix4d qm = Eigen::Matrix4d::Zero();
  qm(0, 0) = qm(1, 1) = q * dt * dt * dt / 3.0;
  qm(0, 2) = qm(2, 0) = qm(1, 3) = qm(3, 1) = q * dt * dt / 2.0;
  qm(2, 2) = qm(3, 3) = q * dt;
  Eigen::Matrix<double, 2, 4> h = Eigen::Matrix<double, 2, 4>::Zero();
  h(0, 0) = h(1, 1) = 1.0;
  const Eigen::Matrix2d r = Eigen::Matrix2d::Identity() * r2;

  for (std::size_t s = t0 + 1; s < n; ++s) {
    x = f * x;
    p = f * p * f.transpose() + qm;
    if (!track.mask[s]) continue;
    const Eigen::Vector2d z(track.positions[s].x, track.positions[s].y);
    const Eigen::Vector2d innov = z - h * x;
    const Eigen::Matrix2d sm = h * p * h.transpose() + r;
    const Eigen::Matrix<double, 4, 2> k = p * h.transpose() * sm.inverse();
    x += k * innov;
    const Eigen::Matrix4d ikh = Eigen::Matrix4d::Identity() - k * h;
    p = ikh * p * ikh.transpose() + k * r * k.transpose();
  }
  std::vector<Vec2> out;
  out.reserve(t_fut);
  for (std::size_t k = 0; k < t_fut; ++k) {
    x = f * x;
    out.push_back({x(0), x(1)});
  }
  return out;
}

double difficulty_score(const Scenario& s, const KalmanConfig& config) {
  if (!s.has_future()) throw ValidationError("scenario " + s.id + ": difficulty needs a future");
  const auto pred = kalman_cv_forecast(s.target(), s.horizon.t_fut, s.horizon.dt(), config);
  double acc = 0.0;
  for (std::size_t t = 0; t < pred.size(); ++t) acc += distance(pred[t], s.future[t]);
  return acc / static_cast<double>(pred.size());
}

// ---- Gaussian mixtures ------------------------------------------------------------

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;

struct ComponentCache {
  Eigen::LLT<MatrixXd> llt;
  double log_norm = 0.0;  // log w - 0.5 (D log 2pi + log det)
};

std::vector<ComponentCache> prepare(const GmmModel& m) {
  std::vector<ComponentCache> cache(m.components());
  const double d = static_cast<double>(m.dim());
  for (std::size_t k = 0; k < m.components(); ++k) {
    cache[k].llt.compute(m.covariances[k]);
    if (cache[k].llt.info() != Eigen::Success)
      throw NumericError("GMM covariance is not positive definite");
    const VectorXd diag = cache[k].llt.matrixL().toDenseMatrix().diagonal();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < diag.size(); ++i) logdet += 2.0 * std::log(diag(i));
    cache[k].log_norm = m.weights[k] > 0.0
                            ? std::log(m.weights[k]) - 0.5 * (d * kLog2Pi + logdet)
                            : -std::numeric_limits<double>::infinity();
  }
  return cache;
}

// log w_k N(x; mu_k, Sigma_k) for every k, and their log-sum-exp.
double component_logs(const GmmModel& m, const std::vector<ComponentCache>& cache,
                      const VectorXd& x, std::vector<double>& logs) {
  logs.resize(m.components());
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < m.components(); ++k) {
    if (!std::isfinite(cache[k].log_norm)) {
      logs[k] = -std::numeric_limits<double>::infinity();
      continue;
    }
    const VectorXd z = cache[k].llt.matrixL().solve(x - m.means[k]);
    logs[k] = cache[k].log_norm - 0.5 * z.squaredNorm();
    best = std::max(best, logs[k]);
  }
  double acc = 0.0;
  for (double l : logs)
    if (std::isfinite(l)) acc += std::exp(l - best);
  return best + std::log(acc);
}

void m_step(const MatrixXd& pts, const MatrixXd& resp, double reg, GmmModel& m) {
  const auto n = pts.rows();
  const auto d = pts.cols();
  for (std::size_t k = 0; k < m.components(); ++k) {
    const auto kk = static_cast<Eigen::Index>(k);
    const double nk = resp.col(kk).sum();
    if (nk <= 0.0) {
      m.weights[k] = 0.0;
      continue;
    }
    m.weights[k] = nk / static_cast<double>(n);
    VectorXd mu = (pts.transpose() * resp.col(kk)) / nk;
    MatrixXd cov = MatrixXd::Zero(d, d);
    for (Eigen::Index i = 0; i < n; ++i) {
      const VectorXd c = pts.row(i).transpose() - mu;
      cov.noalias() += resp(i, kk) * c * c.transpose();
    }
    cov /= nk;
    // MAP update under the fixed prior exp(-reg/2 tr(Sigma^-1)); keeps EM monotone.
    cov.diagonal().array() += reg / nk;
    m.means[k] = std::move(mu);
    m.covariances[k] = std::move(cov);
  }
}

// k-means++ seeding followed by Lloyd iterations; returns hard labels.
std::vector<std::size_t> kmeans_labels(const MatrixXd& pts, std::size_t k, RngStream& rng) {
  const auto n = static_cast<std::size_t>(pts.rows());
  std::vector<VectorXd> centers{pts.row(static_cast<Eigen::Index>(rng.below(n))).transpose()};
  std::vector<double> d2(n);
  while (centers.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centers)
        best = std::min(best, (pts.row(static_cast<Eigen::Index>(i)).transpose() - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    if (total <= 0.0) throw ValidationError("fit_gmm: fewer distinct points than components");
    double u = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      u -= d2[i];
      if (u < 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    centers.push_back(pts.row(static_cast<Eigen::Index>(pick)).transpose());
  }
  std::vector<std::size_t> labels(n, 0);
  for (int iter = 0; iter < 100; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t arg = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = (pts.row(static_cast<Eigen::Index>(i)).transpose() - centers[c]).squaredNorm();
        if (dist < best) {
          best = dist;
          arg = c;
        }
      }
      if (labels[i] != arg || iter == 0) changed = changed || labels[i] != arg;
      labels[i] = arg;
    }
    if (iter > 0 && !changed) break;
    for (std::size_t c = 0; c < k; ++c) {
      VectorXd sum = VectorXd::Zero(pts.cols());
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == c) {
          sum += pts.row(static_cast<Eigen::Index>(i)).transpose();
          ++count;
        }
      if (count > 0) centers[c] = sum / static_cast<double>(count);
    }
  }
  return labels;
}

}  // namespace

double gmm_nll(const GmmModel& model, const VectorXd& x) {
  if (model.components() == 0) throw ValidationError("gmm_nll: unfitted model");
  if (static_cast<std::size_t>(x.size()) != model.dim())
    throw ValidationError("gmm_nll: point dimension does not match the model");
  const auto cache = prepare(model);
  std::vector<double> logs;
  return -component_logs(model, cache, x, logs);
}

double gmm_log_likelihood(const GmmModel& model, const MatrixXd& points) {
  const auto cache = prepare(model);
  std::vector<double> logs;
  double ll = 0.0;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    ll += component_logs(model, cache, points.row(i).transpose(), logs);
  return ll;
}

GmmFit fit_gmm(const MatrixXd& points, const GmmFitOptions& options, RngStream& rng) {
  const auto n = static_cast<std::size_t>(points.rows());
  const std::size_t k = options.components;
  if (points.cols() < 1) throw ValidationError("fit_gmm: dimension must be >= 1");
  if (k < 1) throw ValidationError("fit_gmm: need at least one component");
  if (n <= k) {
    throw ValidationError("fit_gmm: need more points (" + std::to_string(n) + ") than components (" +
                          std::to_string(k) + ")");
  }
  if (!points.allFinite()) throw NumericError("fit_gmm: non-finite input");
  if (((points.rowwise() - points.row(0)).rowwise().squaredNorm().array() == 0.0).all())
    throw ValidationError("fit_gmm: all points are identical");

  GmmFit fit;
  GmmModel& m = fit.model;
  m.weights.assign(k, 0.0);
  m.means.assign(k, VectorXd::Zero(points.cols()));
  m.covariances.assign(k, MatrixXd::Identity(points.cols(), points.cols()));
  const auto labels = kmeans_labels(points, k, rng);
  MatrixXd resp = MatrixXd::Zero(points.rows(), static_cast<Eigen::Index>(k));
  for (std::size_t i = 0; i < n; ++i) resp(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(labels[i])) = 1.0;
  m_step(points, resp, options.reg, m);

  std::vector<double> logs;
  for (std::size_t iter = 0; iter < options.max_iter; ++iter) {
    const auto cache = prepare(m);
    double ll = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ii = static_cast<Eigen::Index>(i);
      const double lse = component_logs(m, cache, points.row(ii).transpose(), logs);
      ll += lse;
      for (std::size_t c = 0; c < k; ++c)
        resp(ii, static_cast<Eigen::Index>(c)) = std::isfinite(logs[c]) ? std::exp(logs[c] - lse) : 0.0;
    }
    if (!std::isfinite(ll)) throw NumericError("fit_gmm: non-finite log-likelihood");
    for (const auto& c : cache) ll -= 0.5 * options.reg * c.llt.solve(MatrixXd::Identity(points.cols(), points.cols())).trace();
    fit.log_likelihood.push_back(ll);
    fit.iterations = iter + 1;
    if (iter > 0 && ll - fit.log_likelihood[iter - 1] < options.tol * static_cast<double>(n)) {
      fit.converged = true;
      break;
    }
    m_step(points, resp, options.reg, m);
  }
  return fit;
}

GmmFit fit_gmm_bic(const MatrixXd& points, std::size_t max_components, const GmmFitOptions& options,
                   RngStream& rng) {
  const double n = static_cast<double>(points.rows());
  const double d = static_cast<double>(points.cols());
  GmmFit best;
  double best_bic = std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k <= max_components && k < static_cast<std::size_t>(points.rows()); ++k) {
    GmmFitOptions o = options;
    o.components = k;
    RngStream sub = rng.substream(k);
    GmmFit fit = fit_gmm(points, o, sub);
    const double kk = static_cast<double>(k);
    const double params = (kk - 1.0) + kk * d + kk * d * (d + 1.0) / 2.0;
    const double bic = -2.0 * gmm_log_likelihood(fit.model, points) + params * std::log(n);
    if (bic < best_bic) {
      best_bic = bic;
      best = std::move(fit);
    }
  }
  return best;
}

// ---- functional PCA -----------------------------------------------------------------

FpcaBasis fpca_fit(const std::vector<std::vector<Vec2>>& curves, double variance_target,
                   std::size_t max_components) {
  if (curves.size() < 2) throw ValidationError("fpca_fit: need at least 2 curves");
  const std::size_t len = curves.front().size();
  if (len < 2) throw ValidationError("fpca_fit: curves need at least 2 samples");
  for (const auto& c : curves)
    if (c.size() != len) throw ValidationError("fpca_fit: curves must share one sampling grid");
  FpcaBasis b;
  b.length = len;
  const auto n = static_cast<Eigen::Index>(curves.size());
  const auto t = static_cast<Eigen::Index>(len);
  for (std::size_t coord = 0; coord < 2; ++coord) {
    MatrixXd x(n, t);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < t; ++j) {
        const Vec2 p = curves[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        x(i, j) = coord == 0 ? p.x : p.y;
      }
    b.mean[coord] = x.colwise().mean().transpose();
    const MatrixXd c = x.rowwise() - b.mean[coord].transpose();
    const MatrixXd cov = (c.transpose() * c) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericError("fpca_fit: eigen-decomposition failed");
    const VectorXd vals = eig.eigenvalues().reverse().cwiseMax(0.0);
    const MatrixXd vecs = eig.eigenvectors().rowwise().reverse();
    const double total = vals.sum();
    b.total_variance[coord] = total;
    std::size_t keep = 1;
    if (total > 0.0) {
      double acc = 0.0;
      keep = 0;
      while (keep < len) {
        acc += vals(static_cast<Eigen::Index>(keep));
        ++keep;
        if (acc / total >= variance_target - 1e-12) break;
      }
    }
    keep = std::min(keep, std::max<std::size_t>(max_components, 1));
    const auto kk = static_cast<Eigen::Index>(keep);
    b.components[coord] = vecs.leftCols(kk);
    for (Eigen::Index j = 0; j < kk; ++j)
      if (b.components[coord].col(j).sum() < 0.0) b.components[coord].col(j) *= -1.0;
    b.explained_ratio[coord] = total > 0.0 ? VectorXd(vals.head(kk) / total) : VectorXd::Zero(kk);
  }
  return b;
}

VectorXd fpca_scores(const FpcaBasis& basis, const std::vector<Vec2>& curve) {
  if (curve.size() != basis.length) throw ValidationError("fpca_scores: curve length mismatch");
  VectorXd out(static_cast<Eigen::Index>(basis.score_dim()));
  Eigen::Index at = 0;
  for (std::size_t coord = 0; coord < 2; ++coord) {
    VectorXd v(static_cast<Eigen::Index>(basis.length));
    for (std::size_t j = 0; j < basis.length; ++j) v(static_cast<Eigen::Index>(j)) = coord == 0 ? curve[j].x : curve[j].y;
    const VectorXd s = basis.components[coord].transpose() * (v - basis.mean[coord]);
    out.segment(at, s.size()) = s;
    at += s.size();
  }
  return out;
}

std::vector<Vec2> fpca_reconstruct(const FpcaBasis& basis, const VectorXd& scores) {
  if (static_cast<std::size_t>(scores.size()) != basis.score_dim())
    throw ValidationError("fpca_reconstruct: score dimension mismatch");
  const auto r0 = static_cast<Eigen::Index>(basis.retained(0));
  const VectorXd xs = basis.mean[0] + basis.components[0] * scores.head(r0);
  const VectorXd ys = basis.mean[1] + basis.components[1] * scores.tail(scores.size() - r0);
  std::vector<Vec2> out(basis.length);
  for (std::size_t j = 0; j < basis.length; ++j)
    out[j] = {xs(static_cast<Eigen::Index>(j)), ys(static_cast<Eigen::Index>(j))};
  return out;
}

std::vector<Vec2> full_trajectory(const Scenario& normalized) {
  std::vector<Vec2> out = normalized.target().positions;
  out.insert(out.end(), normalized.future.begin(), normalized.future.end());
  return out;
}

// ---- combination and smoothing ---------------------------------------------------------

double MinMax::apply(double v) const {
  if (!(hi > lo)) return 0.0;
  return std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
}

MinMax fit_min_max(const std::vector<double>& values) {
  if (values.empty()) throw ValidationError("normalize: empty input");
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  return {*lo, *hi};
}

std::vector<double> normalize(const std::vector<double>& values) {
  const MinMax mm = fit_min_max(values);
  std::vector<double> out;
  out.reserve(values.size());
  for (double v : values) out.push_back(mm.apply(v));
  return out;
}

double tail_score(double s_d, double s_r) {
  if (s_d < 0.0 || s_r < 0.0) throw ValidationError("tail_score: inputs must be nonnegative");
  return std::sqrt(s_d * s_r);
}

double rarity_combine(double s_rs, double s_rt) {
  if (s_rs < 0.0 || s_rt < 0.0) throw ValidationError("rarity: inputs must be nonnegative");
  return std::sqrt(s_rs * s_rt);
}

std::size_t score_bin(double score, std::size_t bins) {
  const double s = std::clamp(score, 0.0, 1.0);
  return std::min(bins - 1, static_cast<std::size_t>(std::floor(s * static_cast<double>(bins))));
}

std::vector<double> smoothed_density(const std::vector<double>& scores, const SmoothingConfig& config) {
  if (scores.empty()) throw ValidationError("smooth_scores: empty corpus");
  if (config.bins == 0) throw ValidationError("smooth_scores: bins must be >= 1");
  std::vector<double> hist(config.bins, 0.0);
  for (double s : scores) hist[score_bin(s, config.bins)] += 1.0 / static_cast<double>(scores.size());
  const auto radius = static_cast<long>(std::ceil(3.0 * config.sigma));
  std::vector<double> kernel;
  for (long j = -radius; j <= radius; ++j)
    kernel.push_back(config.sigma > 0.0 ? std::exp(-0.5 * static_cast<double>(j * j) / (config.sigma * config.sigma))
                                        : 1.0);
  std::vector<double> out(config.bins, 0.0);
  const auto nb = static_cast<long>(config.bins);
  for (long b = 0; b < nb; ++b) {
    double num = 0.0, den = 0.0;
    for (long j = -radius; j <= radius; ++j) {
      const long at = b + j;
      if (at < 0 || at >= nb) continue;
      const double w = kernel[static_cast<std::size_t>(j + radius)];
      num += w * hist[static_cast<std::size_t>(at)];
      den += w;
    }
    out[static_cast<std::size_t>(b)] = num / den;
  }
  return out;
}

namespace {

double inverse_density(const std::vector<double>& density, double score) {
  double floor = std::numeric_limits<double>::infinity();
  for (double d : density)
    if (d > 0.0) floor = std::min(floor, d);
  return 1.0 / std::max(density[score_bin(score, density.size())], floor);
}

}  // namespace

std::vector<double> smooth_scores(const std::vector<double>& scores, const SmoothingConfig& config) {
  const auto density = smoothed_density(scores, config);
  std::vector<double> w;
  w.reserve(scores.size());
  double sum = 0.0;
  for (double s : scores) {
    w.push_back(inverse_density(density, s));
    sum += w.back();
  }
  const double scale = static_cast<double>(scores.size()) / sum;
  for (auto& v : w) v *= scale;
  return w;
}

// ---- pipeline ---------------------------------------------------------------------------

json TailConfig::to_json() const {
  return {{"kalman_process_noise", kalman.process_noise},
          {"kalman_measurement_noise", kalman.measurement_noise},
          {"gmm_components", gmm_components},
          {"bic", bic},
          {"gmm_max_iter", gmm_max_iter},
          {"gmm_tol", gmm_tol},
          {"gmm_reg", gmm_reg},
          {"gmm_min_weight", gmm_min_weight},
          {"fpca_variance", fpca_variance},
          {"fpca_max_components", fpca_max_components},
          {"bins", smoothing.bins},
          {"sigma", smoothing.sigma}};
}

TailConfig TailConfig::from_json(const json& j) {
  TailConfig c;
  c.kalman.process_noise = j.at("kalman_process_noise").get<double>();
  c.kalman.measurement_noise = j.at("kalman_measurement_noise").get<double>();
  c.gmm_components = j.at("gmm_components").get<std::size_t>();
  c.bic = j.at("bic").get<bool>();
  c.gmm_max_iter = j.at("gmm_max_iter").get<std::size_t>();
  c.gmm_tol = j.at("gmm_tol").get<double>();
  c.gmm_reg = j.at("gmm_reg").get<double>();
  c.gmm_min_weight = j.at("gmm_min_weight").get<double>();
  c.fpca_variance = j.at("fpca_variance").get<double>();
  c.fpca_max_components = j.at("fpca_max_components").get<std::size_t>();
  c.smoothing.bins = j.at("bins").get<std::size_t>();
  c.smoothing.sigma = j.at("sigma").get<double>();
  return c;
}

namespace {

Eigen::Vector2d endpoint_of(const Scenario& normalized) {
  return {normalized.future.back().x, normalized.future.back().y};
}

// Refits with one component fewer while any component owns less than
// min_weight of the data, so no component collapses onto a few outliers.
GmmFit fit_one(const MatrixXd& pts, const TailConfig& config, std::size_t k, RngStream rng) {
  GmmFitOptions o;
  o.max_iter = config.gmm_max_iter;
  o.tol = config.gmm_tol;
  o.reg = config.gmm_reg;
  auto light = [&](const GmmFit& f) {
    return *std::min_element(f.model.weights.begin(), f.model.weights.end()) < config.gmm_min_weight;
  };
  for (std::size_t c = std::min<std::size_t>(k, static_cast<std::size_t>(pts.rows()) - 1);; --c) {
    o.components = c;
    RngStream sub = rng.substream(c);
    GmmFit fit = config.bic ? fit_gmm_bic(pts, c, o, sub) : fit_gmm(pts, o, sub);
    if (c == 1 || !light(fit)) return fit;
  }
}

}  // namespace

RawRarity rarity_raw(const TailModels& models, const Scenario& normalized) {
  if (models.endpoint_gmm.components() == 0 || models.fpc_gmm.components() == 0)
    throw ValidationError("rarity_score: models are not fitted");
  if (!normalized.has_future()) throw ValidationError("scenario " + normalized.id + ": rarity needs a future");
  return {gmm_nll(models.endpoint_gmm, endpoint_of(normalized)),
          gmm_nll(models.fpc_gmm, fpca_scores(models.basis, full_trajectory(normalized)))};
}

TailModels fit_tail_models(const std::vector<Scenario>& train, const TailConfig& config, RngStream& rng,
                           std::vector<TailScore>* train_scores) {
  if (train.size() < 3) throw ValidationError("tail scoring needs at least 3 training scenarios");
  TailModels m;
  m.config = config;
  m.horizon = train.front().horizon;
  std::vector<Scenario> norm;
  norm.reserve(train.size());
  for (const auto& s : train) {
    if (!s.has_future()) throw ValidationError("scenario " + s.id + ": tail scoring needs a future");
    norm.push_back(normalize_frame(s));
  }
  const auto n = static_cast<Eigen::Index>(norm.size());
  const std::size_t k = config.gmm_components > 0 ? config.gmm_components : (norm.size() >= 500 ? 10 : 4);

  MatrixXd endpoints(n, 2);
  std::vector<std::vector<Vec2>> curves;
  for (Eigen::Index i = 0; i < n; ++i) {
    endpoints.row(i) = endpoint_of(norm[static_cast<std::size_t>(i)]).transpose();
    curves.push_back(full_trajectory(norm[static_cast<std::size_t>(i)]));
  }
  GmmFit ep = fit_one(endpoints, config, k, rng.substream(1));
  m.endpoint_gmm = ep.model;
  m.basis = fpca_fit(curves, config.fpca_variance, config.fpca_max_components);
  MatrixXd fpc(n, static_cast<Eigen::Index>(m.basis.score_dim()));
  for (Eigen::Index i = 0; i < n; ++i) fpc.row(i) = fpca_scores(m.basis, curves[static_cast<std::size_t>(i)]).transpose();
  GmmFit tp = fit_one(fpc, config, k, rng.substream(2));
  m.fpc_gmm = tp.model;
  m.em_traces = {ep.log_likelihood, tp.log_likelihood};

  std::vector<double> sd, rs, rt;
  for (const auto& s : norm) {
    sd.push_back(difficulty_score(s, config.kalman));
    const RawRarity r = rarity_raw(m, s);
    rs.push_back(r.s_rs);
    rt.push_back(r.s_rt);
  }
  m.sd_range = fit_min_max(sd);
  m.srs_range = fit_min_max(rs);
  m.srt_range = fit_min_max(rt);

  std::vector<TailScore> scores(norm.size());
  std::vector<double> s_values;
  for (std::size_t i = 0; i < norm.size(); ++i) {
    TailScore& t = scores[i];
    t.id = norm[i].id;
    t.s_d = m.sd_range.apply(sd[i]);
    t.s_rs = m.srs_range.apply(rs[i]);
    t.s_rt = m.srt_range.apply(rt[i]);
    t.s_r = rarity_combine(t.s_rs, t.s_rt);
    t.s = tail_score(t.s_d, t.s_r);
    s_values.push_back(t.s);
  }
  m.density = smoothed_density(s_values, config.smoothing);
  double sum = 0.0;
  for (double s : s_values) sum += inverse_density(m.density, s);
  m.weight_scale = static_cast<double>(s_values.size()) / sum;
  for (auto& t : scores) t.s_tilde = inverse_density(m.density, t.s) * m.weight_scale;
  if (train_scores) *train_scores = std::move(scores);
  return m;
}

std::vector<TailScore> score_scenarios(const TailModels& models, const std::vector<Scenario>& corpus) {
  std::vector<TailScore> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    if (!(s.horizon == models.horizon)) throw ValidationError("scenario " + s.id + ": horizon differs from fitted models");
    const Scenario n = normalize_frame(s);
    const RawRarity r = rarity_raw(models, n);
    TailScore t;
    t.id = s.id;
    t.s_d = models.sd_range.apply(difficulty_score(n, models.config.kalman));
    t.s_rs = models.srs_range.apply(r.s_rs);
    t.s_rt = models.srt_range.apply(r.s_rt);
    t.s_r = rarity_combine(t.s_rs, t.s_rt);
    t.s = tail_score(t.s_d, t.s_r);
    t.s_tilde = inverse_density(models.density, t.s) * models.weight_scale;
    out.push_back(t);
  }
  return out;
}

// ---- serialization --------------------------------------------------------------------------

namespace {

json vec_json(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorXd vec_from(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

json mat_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) rows.push_back(vec_json(m.row(i).transpose()));
  return rows;
}

MatrixXd mat_from(const json& j, Eigen::Index cols_if_empty = 0) {
  const auto r = static_cast<Eigen::Index>(j.size());
  const Eigen::Index c = r > 0 ? static_cast<Eigen::Index>(j[0].size()) : cols_if_empty;
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i) m.row(i) = vec_from(j[static_cast<std::size_t>(i)]).transpose();
  return m;
}

json gmm_json(const GmmModel& g) {
  json means = json::array(), covs = json::array();
  for (const auto& mu : g.means) means.push_back(vec_json(mu));
  for (const auto& c : g.covariances) covs.push_back(mat_json(c));
  return {{"weights", g.weights}, {"means", means}, {"covariances", covs}};
}

GmmModel gmm_from(const json& j) {
  GmmModel g;
  g.weights = j.at("weights").get<std::vector<double>>();
  for (const auto& mu : j.at("means")) g.means.push_back(vec_from(mu));
  for (const auto& c : j.at("covariances")) g.covariances.push_back(mat_from(c));
  if (g.means.size() != g.weights.size() || g.covariances.size() != g.weights.size())
    throw ValidationError("tail models: GMM arrays disagree in component count");
  return g;
}

}  // namespace

json models_to_json(const TailModels& m) {
  json basis = {{"length", m.basis.length}};
  for (std::size_t c = 0; c < 2; ++c) {
    const std::string key = c == 0 ? "x" : "y";
    basis[key] = {{"mean", vec_json(m.basis.mean[c])},
                  {"components", mat_json(m.basis.components[c].transpose())},
                  {"explained_ratio", vec_json(m.basis.explained_ratio[c])},
                  {"total_variance", m.basis.total_variance[c]}};
  }
  return {{"format", "cdk-tail-models"},
          {"version", 1},
          {"config", m.config.to_json()},
          {"horizon", {{"t_obs", m.horizon.t_obs}, {"t_fut", m.horizon.t_fut}, {"hz", m.horizon.hz}}},
          {"endpoint_gmm", gmm_json(m.endpoint_gmm)},
          {"fpc_gmm", gmm_json(m.fpc_gmm)},
          {"fpca", basis},
          {"ranges",
           {{"S_d", {m.sd_range.lo, m.sd_range.hi}},
            {"S_rs", {m.srs_range.lo, m.srs_range.hi}},
            {"S_rt", {m.srt_range.lo, m.srt_range.hi}}}},
          {"density", m.density},
          {"weight_scale", m.weight_scale}};
}

TailModels models_from_json(const json& j) {
  if (j.value("format", "") != "cdk-tail-models" || j.value("version", 0) != 1)
    throw ValidationError("not a version-1 cdk-tail-models document");
  TailModels m;
  try {
    m.config = TailConfig::from_json(j.at("config"));
    const json& h = j.at("horizon");
    m.horizon = {h.at("t_obs").get<std::size_t>(), h.at("t_fut").get<std::size_t>(), h.at("hz").get<double>()};
    m.endpoint_gmm = gmm_from(j.at("endpoint_gmm"));
    m.fpc_gmm = gmm_from(j.at("fpc_gmm"));
    const json& b = j.at("fpca");
    m.basis.length = b.at("length").get<std::size_t>();
    for (std::size_t c = 0; c < 2; ++c) {
      const json& bc = b.at(c == 0 ? "x" : "y");
      m.basis.mean[c] = vec_from(bc.at("mean"));
      m.basis.components[c] = mat_from(bc.at("components"), static_cast<Eigen::Index>(m.basis.length)).transpose();
      m.basis.explained_ratio[c] = vec_from(bc.at("explained_ratio"));
      m.basis.total_variance[c] = bc.at("total_variance").get<double>();
    }
    auto range = [&](const char* key) {
      const auto v = j.at("ranges").at(key).get<std::vector<double>>();
      if (v.size() != 2) throw ValidationError(std::string("tail models: bad range ") + key);
      return MinMax{v[0], v[1]};
    };
    m.sd_range = range("S_d");
    m.srs_range = range("S_rs");
    m.srt_range = range("S_rt");
    m.density = j.at("density").get<std::vector<double>>();
    m.weight_scale = j.at("weight_scale").get<double>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("tail models: ") + e.what());
  }
  return m;
}

void save_models(const std::filesystem::path& path, const TailModels& models, const Provenance& provenance) {
  json j = models_to_json(models);
  j["provenance"] = provenance.to_json();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(1) << '\n';
}

TailModels load_models(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open tail models file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
  return models_from_json(j);
}

void write_scores_csv(const std::filesystem::path& path, const std::vector<TailScore>& scores,
                      const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << provenance.csv_comment() << '\n' << "id,S_d,S_rs,S_rt,S_r,S,S_tilde\n";
  for (const auto& s : scores) {
    out << s.id << ',' << format_double(s.s_d, 17) << ',' << format_double(s.s_rs, 17) << ','
        << format_double(s.s_rt, 17) << ',' << format_double(s.s_r, 17) << ','
        << format_double(s.s, 17) << ',' << format_double(s.s_tilde, 17) << '\n';
  }
}

std::vector<TailScore> read_scores_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open scores file " + path.string());
  std::vector<TailScore> out;
  std::string line;
  bool header = false;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (!header) {
      if (line.rfind("id,S_d,S_rs,S_rt,S_r,S,S_tilde", 0) != 0)
        throw ValidationError(path.string() + ": unexpected scores header");
      header = true;
      continue;
    }
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 7) throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": expected 7 columns");
    TailScore t;
    t.id = cells[0];
    try {
      t.s_d = std::stod(cells[1]);
      t.s_rs = std::stod(cells[2]);
      t.s_rt = std::stod(cells[3]);
      t.s_r = std::stod(cells[4]);
      t.s = std::stod(cells[5]);
      t.s_tilde = std::stod(cells[6]);
    } catch (const std::exception&) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": non-numeric score");
    }
    out.push_back(t);
  }
  return out;
}

}  // namespace cdk
