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

#include "cdk/training.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <thread>
#include <unordered_map>

namespace cdk {

using nlohmann::json;

// ---- loss -------------------------------------------------------------------------

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& o) {
  mode += o.mode;
  future_r += o.future_r;
  future_t_raw += o.future_t_raw;
  future_t += o.future_t;
  scene += o.scene;
  group += o.group;
  total += o.total;
  return *this;
}

LossBreakdown LossBreakdown::scaled(double s) const {
  return {mode * s, future_r * s, future_t_raw * s, future_t * s, scene * s, group * s, total * s};
}

const std::vector<std::string>& LossBreakdown::column_names() {
  static const std::vector<std::string> kNames{"L_mode",  "L_future_r", "L_future_t_raw", "L_future_t",
                                               "L_scene", "L_group",    "total"};
  return kNames;
}

std::vector<double> LossBreakdown::values() const {
  return {mode, future_r, future_t_raw, future_t, scene, group, total};
}

std::size_t winner_by_fde(const Tensor& traj, const Tensor& gt, std::size_t modes) {
  const std::size_t tf = gt.rows();
  if (modes == 0 || traj.rows() != modes * tf || traj.cols() != 2 || gt.cols() != 2)
    throw ValidationError("winner_by_fde: expected K*T_f x 2 candidates and T_f x 2 ground truth");
  std::size_t best = 0;
  double best_d = 0.0;
  for (std::size_t k = 0; k < modes; ++k) {
    const std::size_t r = k * tf + tf - 1;
    const double d = std::hypot(traj.at(r, 0) - gt.at(tf - 1, 0), traj.at(r, 1) - gt.at(tf - 1, 1));
    if (k == 0 || d < best_d) {
      best = k;
      best_d = d;
    }
  }
  return best;
}

namespace {

// Regression of the FDE winner plus cross-entropy towards it.
Var multimodal_loss(const MultimodalHead& head, const Tensor& gt, std::size_t* winner) {
  const Tensor& probs = head.probs.value();
  const std::size_t k = probs.size(), tf = gt.rows();
  *winner = winner_by_fde(head.trajectories.value(), gt, k);
  Tensor onehot({1, k});
  onehot[*winner] = 1.0;
  return add(smooth_l1(slice_rows(head.trajectories, *winner * tf, tf), gt), cross_entropy(head.probs, onehot));
}

}  // namespace

LossResult compute_loss(const ModelOutput& out, const SceneInput& in, double s_tilde, double alpha) {
  if (in.future.size() == 0) throw ValidationError("scenario " + in.id + ": missing ground-truth future");
  if (!(s_tilde >= 0.0) || !std::isfinite(s_tilde)) throw ValidationError("scenario " + in.id + ": S_tilde must be >= 0");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("alpha must be >= 0");
  const Tensor& gt = in.future;
  const std::size_t tf = gt.rows();
  LossResult r;
  Var total = multimodal_loss(out.scene, gt, &r.scene_winner);
  r.terms.scene = total.value()[0];
  if (out.aux.mode.probs.valid()) {
    const Var l = multimodal_loss(out.aux.mode, gt, &r.mode_winner);
    r.terms.mode = l.value()[0];
    total = add(total, l);
  }
  if (out.aux.regular.valid()) {
    const Var l = smooth_l1(out.aux.regular, gt);
    r.terms.future_r = l.value()[0];
    total = add(total, l);
  }
  if (out.aux.tail.valid()) {
    const Var raw = smooth_l1(out.aux.tail, gt);
    const Var weighted = scale(raw, s_tilde);
    r.terms.future_t_raw = raw.value()[0];
    r.terms.future_t = weighted.value()[0];
    total = add(total, scale(weighted, alpha));
  }
  for (std::size_t a = 0; a < in.num_agents; ++a) {
    if (!in.neighbor_valid[a]) continue;
    Tensor target({tf, 2});
    for (std::size_t t = 0; t < tf; ++t)
      for (std::size_t c = 0; c < 2; ++c) target.at(t, c) = in.neighbor_future.at(a * tf + t, c);
    const Var l = smooth_l1(slice_rows(out.aux.group, a * tf, tf), target);
    r.terms.group += l.value()[0];
    total = add(total, l);
  }
  r.total = total;
  r.terms.total = total.value()[0];
  return r;
}

// ---- config and optimizer ------------------------------------------------------------

void TrainConfig::validate() const {
  if (epochs == 0) throw ValidationError("train: epochs must be >= 1");
  if (batch_size == 0) throw ValidationError("train: batch size must be >= 1");
  if (!(lr > 0.0)) throw ValidationError("train: learning rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ValidationError("train: weight decay must be >= 0");
  if (!(alpha >= 0.0)) throw ValidationError("train: alpha must be >= 0");
  if (!(clip_norm >= 0.0)) throw ValidationError("train: clip norm must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0))
    throw ValidationError("train: invalid Adam constants");
  if (schedule != "cosine" && schedule != "constant")
    throw ValidationError("train: schedule must be cosine or constant, got '" + schedule + "'");
  if (threads == 0) throw ValidationError("train: threads must be >= 1");
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs}, {"batch_size", batch_size}, {"lr", lr},         {"weight_decay", weight_decay},
          {"beta1", beta1},   {"beta2", beta2},           {"eps", eps},       {"clip_norm", clip_norm},
          {"alpha", alpha},   {"tail_weighting", tail_weighting},             {"schedule", schedule},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.alpha = j.value("alpha", c.alpha);
  c.tail_weighting = j.value("tail_weighting", c.tail_weighting);
  c.schedule = j.value("schedule", c.schedule);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

double scheduled_lr(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
  if (config.schedule == "constant" || total_steps == 0) return config.lr;
  const double x = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
  return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * x));
}

AdamW::AdamW(std::size_t size, const TrainConfig& config) : config_(config), m_(size, 0.0), v_(size, 0.0) {}

void AdamW::step(ParamStore& params, const std::vector<double>& grad, double lr) {
  if (grad.size() != m_.size()) throw ValidationError("AdamW: gradient size differs from the parameter count");
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& p : params) {
    auto& w = p.value.storage();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const std::size_t i = p.offset + j;
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      w[j] -= lr * config_.weight_decay * w[j];
      w[j] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + config_.eps);
    }
  }
}

double clip_global_norm(std::vector<double>& grad, double max_norm) {
  double sq = 0.0;
  for (double g : grad) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (double& g : grad) g *= s;
  }
  return norm;
}

// ---- gradients ------------------------------------------------------------------------

LossBreakdown evaluate_loss(const CdkFormer& model, const SceneInput& in, double s_tilde, double alpha) {
  Tape tape;
  ForwardCtx ctx{tape};
  return compute_loss(model.forward(ctx, in), in, s_tilde, alpha).terms;
}

namespace {

struct ScenarioGrad {
  LossBreakdown terms;
  std::vector<std::pair<std::size_t, std::vector<double>>> grads;  // (parameter index, gradient)
};

// Runs forward and backward for one scenario; `sink` receives every parameter gradient.
LossBreakdown scenario_gradient(const CdkFormer& model, const SceneInput& in, double s_tilde, double alpha,
                                RngStream rng, const std::function<void(std::size_t, std::span<const double>)>& sink) {
  Tape tape;
  ForwardCtx ctx{tape, true, model.config().dropout, &rng};
  try {
    const LossResult r = compute_loss(model.forward(ctx, in), in, s_tilde, alpha);
    tape.backward(r.total);
    tape.for_each_param_grad(sink);
    return r.terms;
  } catch (const NumericError& e) {
    throw TrainingDiverged("scenario " + in.id + ": " + e.what());
  }
}

}  // namespace

LossBreakdown batch_gradient(const CdkFormer& model, const std::vector<const SceneInput*>& batch,
                             const std::vector<double>& s_tilde, const std::vector<std::size_t>& index,
                             const TrainConfig& config, std::uint64_t dropout_key, std::vector<double>& grad) {
  if (batch.empty() || s_tilde.size() != batch.size() || index.size() != batch.size())
    throw ValidationError("batch_gradient: batch, weights and indices must be aligned and nonempty");
  const ParamStore& params = model.params();
  grad.assign(params.total_size(), 0.0);
  const RngStream base(dropout_key);
  auto accumulate = [&](std::size_t slot, std::span<const double> g) {
    const std::size_t off = params[slot].offset;
    for (std::size_t j = 0; j < g.size(); ++j) grad[off + j] += g[j];
  };
  LossBreakdown sum;
  const std::size_t threads = std::min(config.threads, batch.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < batch.size(); ++i)
      sum += scenario_gradient(model, *batch[i], s_tilde[i], config.alpha, base.substream(index[i]), accumulate);
  } else {
    std::vector<ScenarioGrad> parts(batch.size());
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w)
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = w; i < batch.size(); i += threads)
            parts[i].terms = scenario_gradient(model, *batch[i], s_tilde[i], config.alpha, base.substream(index[i]),
                                               [&](std::size_t slot, std::span<const double> g) {
                                                 parts[i].grads.emplace_back(slot, std::vector<double>(g.begin(), g.end()));
                                               });
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    for (auto& p : parts) {
      sum += p.terms;
      for (const auto& [slot, g] : p.grads) accumulate(slot, g);
    }
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (double& g : grad) g *= inv;
  return sum.scaled(inv);
}

// ---- training loop ----------------------------------------------------------------------

std::vector<double> align_weights(const std::vector<Scenario>& corpus, const std::vector<TailScore>& scores) {
  std::unordered_map<std::string, double> by_id;
  for (const auto& s : scores) by_id[s.id] = s.s_tilde;
  std::vector<double> out;
  out.reserve(corpus.size());
  for (const auto& s : corpus) {
    const auto it = by_id.find(s.id);
    if (it == by_id.end()) throw ValidationError("scores file has no entry for scenario '" + s.id + "'");
    out.push_back(it->second);
  }
  return out;
}

namespace {

std::string csv_row(const EpochMetrics& m) {
  std::string row = std::to_string(m.epoch) + "," + format_double(m.lr, 17);
  for (double v : m.loss.values()) row += "," + format_double(v, 17);
  return row;
}

}  // namespace

std::vector<EpochMetrics> train(CdkFormer& model, const std::vector<SceneInput>& inputs,
                                const std::vector<double>& s_tilde, const TrainConfig& config,
                                const TrainOptions& options) {
  config.validate();
  if (inputs.empty()) throw ValidationError("train: corpus is empty");
  if (s_tilde.size() != inputs.size()) throw ValidationError("train: scores are not aligned with the corpus");
  for (const auto& in : inputs)
    if (in.future.size() == 0) throw ValidationError("train: scenario " + in.id + " has no ground-truth future");

  std::ofstream log, timing;
  const bool write = !options.out_dir.empty();
  json meta_base = {{"train", config.to_json()}};
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    log.open(options.out_dir / "metrics.csv", std::ios::binary);
    timing.open(options.out_dir / "metrics.timing.csv", std::ios::binary);
    if (!log || !timing) throw std::runtime_error("cannot write metrics in " + options.out_dir.string());
    log << options.provenance.csv_comment() << "\nepoch,lr";
    for (const auto& c : LossBreakdown::column_names()) log << ',' << c;
    log << '\n';
    timing << options.provenance.csv_comment() << "\nepoch,seconds\n";
  }

  const std::size_t n = inputs.size(), b = config.batch_size;
  const std::size_t steps_per_epoch = (n + b - 1) / b, total_steps = config.epochs * steps_per_epoch;
  AdamW opt(model.params().total_size(), config);
  const RngStream root(config.seed);
  const RngStream shuffle_root = root.substream(1), dropout_root = root.substream(2);
  std::vector<std::size_t> order(n);
  std::vector<double> grad;
  std::vector<EpochMetrics> history;
  std::size_t step = 0;

  for (std::size_t e = 0; e < config.epochs; ++e) {
    const auto start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    RngStream shuffle = shuffle_root.substream(e);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);
    EpochMetrics m;
    m.epoch = e + 1;
    m.lr = scheduled_lr(config, step, total_steps);
    LossBreakdown sum;
    for (std::size_t bi = 0; bi < steps_per_epoch; ++bi, ++step) {
      std::vector<const SceneInput*> batch;
      std::vector<double> weights;
      std::vector<std::size_t> index;
      for (std::size_t i = bi * b; i < std::min(n, (bi + 1) * b); ++i) {
        batch.push_back(&inputs[order[i]]);
        weights.push_back(config.tail_weighting ? s_tilde[order[i]] : 1.0);
        index.push_back(order[i]);
      }
      const std::string where = "epoch " + std::to_string(e + 1) + ", batch " + std::to_string(bi);
      LossBreakdown mean;
      try {
        mean = batch_gradient(model, batch, weights, index, config, dropout_root.substream(e).next_u64(), grad);
      } catch (const TrainingDiverged& err) {
        throw TrainingDiverged("training diverged at " + where + ": " + err.what());
      }
      const double norm = clip_global_norm(grad, config.clip_norm);
      if (!std::isfinite(mean.total) || !std::isfinite(norm))
        throw TrainingDiverged("training diverged at " + where + ": non-finite loss or gradient");
      opt.step(model.params(), grad, scheduled_lr(config, step, total_steps));
      sum += mean.scaled(static_cast<double>(batch.size()));
    }
    m.loss = sum.scaled(1.0 / static_cast<double>(n));
    m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    history.push_back(m);
    if (write) {
      log << csv_row(m) << '\n' << std::flush;
      timing << m.epoch << ',' << format_double(m.seconds, 6) << '\n' << std::flush;
      json meta = meta_base;
      meta["epoch"] = m.epoch;
      save_checkpoint(options.out_dir / "checkpoint.ckpt", model, options.provenance, meta);
    }
    if (options.on_epoch) options.on_epoch(m);
  }
  if (write) {
    json meta = meta_base;
    meta["epoch"] = config.epochs;
    save_checkpoint(options.out_dir / "final.ckpt", model, options.provenance, meta);
  }
  return history;
}

}  // namespace cdk
