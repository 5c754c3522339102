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

// Command-line pipeline: gen, score, stats, train, predict, eval.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>
#include <unordered_map>

#include "CLI11.hpp"
#include "cdk/deviation.hpp"
#include "cdk/evaluation.hpp"
#include "cdk/training.hpp"

namespace {

using namespace cdk;
using nlohmann::json;
namespace fs = std::filesystem;

struct Options {
  // shared
  std::string corpus, scores, checkpoint, out, config, horizon, predictions, models;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::vector<std::string> ablate;
  // gen
  std::size_t n = 0;
  double tail_fraction = 0.25;
  std::string split = "train";
  // stats
  double quantile = 0.1;
  // train overrides; unset values keep config-file or default values
  std::optional<std::size_t> epochs, batch_size, d, heads, layers, modes, experts;
  std::optional<double> lr, alpha, dropout;
  bool no_tail_weighting = false;
  // eval
  bool conventional_brier = false;
};

void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

json read_config(const Options& o) {
  if (o.config.empty()) return json::object();
  std::ifstream in(o.config);
  if (!in) throw ValidationError("cannot open config file " + o.config);
  try {
    json j = json::parse(in);
    if (!j.is_object()) throw ValidationError(o.config + ": config must be a JSON object");
    for (const auto& [k, v] : j.items())
      if (k != "generator" && k != "tail" && k != "model" && k != "train")
        throw ValidationError(o.config + ": unknown section '" + k + "' (expected generator, tail, model, train)");
    return j;
  } catch (const json::exception& e) {
    throw ValidationError(o.config + ": " + e.what());
  }
}

// Applies the named section of the config file on top of `defaults`, rejecting unknown keys.
json merged_section(const json& config, const std::string& section, json defaults) {
  if (!config.contains(section)) return defaults;
  for (const auto& [k, v] : config.at(section).items()) {
    if (!defaults.contains(k)) throw ValidationError("config: unknown key '" + section + "." + k + "'");
    if (v.is_object() && defaults[k].is_object())
      defaults[k].update(v);
    else
      defaults[k] = v;
  }
  return defaults;
}

Horizon parse_horizon(const std::string& name) {
  if (name == "desk") return Horizon::desk();
  if (name == "av2") return Horizon::av2();
  throw ValidationError("--horizon must be desk or av2, got '" + name + "'");
}

Provenance provenance(std::uint64_t seed, json config) {
  Provenance p;
  p.seed = seed;
  p.config = std::move(config);
  return p;
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ValidationError(std::string("missing required flag ") + flag);
}

std::vector<Scenario> with_future(const std::vector<Scenario>& corpus, const char* stage) {
  std::vector<Scenario> out;
  for (const auto& s : corpus)
    if (s.has_future()) out.push_back(s);
  if (out.size() != corpus.size())
    warn(std::to_string(corpus.size() - out.size()) + " scenarios without a ground-truth future are skipped by " + stage);
  if (out.empty()) throw ValidationError(std::string(stage) + ": no scenario has a ground-truth future");
  return out;
}

// ---- subcommands ------------------------------------------------------------------------

int run_gen(const Options& o) {
  require(o.out, "--out");
  if (o.n == 0) throw ValidationError("gen: --n must be >= 1");
  const json config = read_config(o);
  GeneratorConfig g;
  if (!o.horizon.empty()) g.horizon = parse_horizon(o.horizon);
  g.split = parse_split(o.split);
  g = GeneratorConfig::from_json(merged_section(config, "generator", g.to_json()));
  RngStream rng(o.seed);
  Corpus corpus;
  corpus.horizon = g.horizon;
  corpus.scenarios = generate_synthetic(o.n, o.tail_fraction, rng, g);
  corpus.provenance =
      provenance(o.seed, {{"command", "gen"}, {"n", o.n}, {"tail_fraction", o.tail_fraction}, {"generator", g.to_json()}});
  save_scenarios(o.out, corpus);
  std::cout << "wrote " << corpus.scenarios.size() << " scenarios to " << o.out << '\n';
  return 0;
}

int run_score(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.out, "--out");
  const Corpus corpus = load_scenarios(o.corpus);
  const std::vector<Scenario> scored = with_future(corpus.scenarios, "score");
  TailModels models;
  json cfg = {{"command", "score"}, {"corpus", corpus.provenance.hash()}};
  if (!o.models.empty()) {
    models = load_models(o.models);
    cfg["models"] = fs::path(o.models).filename().string();
  } else {
    const TailConfig tc = TailConfig::from_json(merged_section(read_config(o), "tail", TailConfig{}.to_json()));
    std::vector<Scenario> train;
    for (const auto& s : scored)
      if (s.split == Split::kTrain) train.push_back(s);
    if (train.empty()) throw ValidationError("score: corpus has no training-split scenarios to fit the models on");
    RngStream rng(o.seed);
    models = fit_tail_models(train, tc, rng);
    cfg["tail"] = tc.to_json();
  }
  const Provenance prov = provenance(o.seed, cfg);
  fs::create_directories(o.out);
  const auto scores = score_scenarios(models, scored);
  write_scores_csv(fs::path(o.out) / "scores.csv", scores, prov);
  if (o.models.empty()) save_models(fs::path(o.out) / "tail_models.json", models, prov);
  std::cout << "scored " << scores.size() << " scenarios into " << (fs::path(o.out) / "scores.csv").string() << '\n';
  return 0;
}

int run_stats(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.scores, "--scores");
  require(o.out, "--out");
  const Corpus corpus = load_scenarios(o.corpus);
  const std::vector<Scenario> scored = with_future(corpus.scenarios, "stats");
  std::vector<TailScore> scores = read_scores_csv(o.scores);
  std::unordered_map<std::string, double> s_by_id;
  for (const auto& s : scores) s_by_id[s.id] = s.s;
  std::vector<double> s;
  for (const auto& sc : scored) {
    const auto it = s_by_id.find(sc.id);
    if (it == s_by_id.end()) throw ValidationError("stats: scores file has no entry for scenario '" + sc.id + "'");
    s.push_back(it->second);
  }
  const auto rows = cohort_stats(scored, s, o.quantile);
  write_cohort_csv(o.out, rows,
                   provenance(o.seed, {{"command", "stats"}, {"corpus", corpus.provenance.hash()}, {"quantile", o.quantile}}));
  std::printf("%-12s %12s %12s %12s %12s\n", "metric", "head_mean", "head_std", "tail_mean", "tail_std");
  for (const auto& r : rows)
    std::printf("%-12s %12.4f %12.4f %12.4f %12.4f\n", r.metric.c_str(), r.head_mean, r.head_std, r.tail_mean, r.tail_std);
  return 0;
}

int run_train(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.out, "--out");
  const json config = read_config(o);
  const Corpus corpus = load_scenarios(o.corpus);
  ModelConfig mc;
  mc.horizon = corpus.horizon;
  if (!o.horizon.empty() && !(parse_horizon(o.horizon) == corpus.horizon))
    throw ValidationError("train: --horizon " + o.horizon + " does not match the corpus horizon");
  mc = ModelConfig::from_json(merged_section(config, "model", mc.to_json()));
  if (!(mc.horizon == corpus.horizon)) throw ValidationError("train: model horizon does not match the corpus horizon");
  if (o.d) mc.d = *o.d;
  if (o.heads) mc.heads = *o.heads;
  if (o.layers) mc.layers = *o.layers;
  if (o.modes) mc.modes = *o.modes;
  if (o.experts) mc.experts = *o.experts;
  if (o.dropout) mc.dropout = *o.dropout;
  for (const auto& flag : o.ablate) mc.apply_ablation(flag);
  mc.validate();

  TrainConfig tc;
  tc.seed = o.seed;
  tc = TrainConfig::from_json(merged_section(config, "train", tc.to_json()));
  if (o.epochs) tc.epochs = *o.epochs;
  if (o.batch_size) tc.batch_size = *o.batch_size;
  if (o.lr) tc.lr = *o.lr;
  if (o.alpha) tc.alpha = *o.alpha;
  if (o.no_tail_weighting) tc.tail_weighting = false;
  tc.threads = o.threads;
  tc.validate();

  std::vector<Scenario> split;
  for (const auto& s : corpus.scenarios)
    if (s.split == Split::kTrain) split.push_back(s);
  const std::vector<Scenario> scenarios = with_future(split, "train");
  std::vector<double> weights(scenarios.size(), 1.0);
  if (!o.scores.empty()) {
    weights = align_weights(scenarios, read_scores_csv(o.scores));
  } else if (tc.tail_weighting) {
    warn("no --scores given: training with S_tilde == 1");
  }
  std::vector<SceneInput> inputs;
  for (const auto& s : scenarios) inputs.push_back(build_input(s));

  CdkFormer model(mc, o.seed);
  TrainOptions opts;
  opts.out_dir = o.out;
  opts.provenance = provenance(o.seed, {{"command", "train"},
                                        {"corpus", corpus.provenance.hash()},
                                        {"weighted", !o.scores.empty()},
                                        {"model", mc.to_json()},
                                        {"train", tc.to_json()}});
  opts.on_epoch = [&](const EpochMetrics& m) {
    std::printf("epoch %3zu  lr %.3e  loss %.5f  (%.1fs)\n", m.epoch, m.lr, m.loss.total, m.seconds);
    std::fflush(stdout);
  };
  std::printf("training %zu scenarios, %zu parameters\n", inputs.size(), model.params().total_size());
  cdk::train(model, inputs, weights, tc, opts);
  std::cout << "wrote " << (fs::path(o.out) / "final.ckpt").string() << '\n';
  return 0;
}

int run_predict(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.checkpoint, "--checkpoint");
  require(o.out, "--out");
  if (o.threads == 0) throw ValidationError("--threads must be >= 1");
  const Corpus corpus = load_scenarios(o.corpus);
  json meta;
  const auto model = load_checkpoint(o.checkpoint, &meta);
  if (!(model->config().horizon == corpus.horizon))
    throw ValidationError("predict: checkpoint horizon does not match the corpus horizon");
  const auto& sc = corpus.scenarios;
  std::vector<PredictionSet> preds(sc.size());
  std::vector<std::exception_ptr> errors(o.threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < o.threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < sc.size(); i += o.threads) preds[i] = model->predict(build_input(sc[i]));
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  write_predictions(o.out, preds,
                    provenance(o.seed, {{"command", "predict"},
                                        {"corpus", corpus.provenance.hash()},
                                        {"model", model->config().to_json()},
                                        {"checkpoint_meta", meta}}));
  std::cout << "wrote " << preds.size() << " predictions to " << o.out << '\n';
  return 0;
}

int run_eval(const Options& o) {
  require(o.corpus, "--corpus");
  require(o.predictions, "--predictions");
  require(o.out, "--out");
  const Corpus corpus = load_scenarios(o.corpus);
  const std::vector<Scenario> scored = with_future(corpus.scenarios, "eval");
  std::optional<std::vector<TailScore>> scores;
  if (o.scores.empty())
    warn("no --scores given: reporting the 'all' slice only");
  else
    scores = read_scores_csv(o.scores);
  ReportOptions ro;
  if (o.conventional_brier) ro.convention = BrierConvention::kConventional;
  if (scored.size() < ro.feature_bins) warn("fewer scenarios than quantile bins: feature report skipped");
  const MetricsReport report = sliced_report(scored, read_predictions(o.predictions), scores, ro);
  write_report_csv(o.out, report,
                   provenance(o.seed, {{"command", "eval"},
                                       {"corpus", corpus.provenance.hash()},
                                       {"sliced", scores.has_value()},
                                       {"brier", o.conventional_brier ? "conventional" : "averaged"}}));
  print_report(std::cout, report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options o;
  CLI::App app{"cdkformer: long-tail trajectory prediction pipeline"};
  app.require_subcommand(1, 1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  auto common = [&](CLI::App* c) {
    c->add_option("--seed", o.seed, "Random seed")->capture_default_str();
    c->add_option("--threads", o.threads, "Worker threads; 1 guarantees bit-reproducibility")->capture_default_str();
    c->add_option("--config", o.config, "JSON overrides with sections generator, tail, model, train");
    c->add_option("--horizon", o.horizon, "Horizon preset: desk or av2");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic scenario corpus");
  common(gen);
  gen->add_option("--n", o.n, "Number of scenarios")->required();
  gen->add_option("--tail-fraction", o.tail_fraction, "Fraction of tail maneuvers")->capture_default_str();
  gen->add_option("--split", o.split, "Split label: train, val or test")->capture_default_str();
  gen->add_option("--out", o.out, "Output corpus file")->required();

  auto* score = app.add_subcommand("score", "Fit rarity models and compute tail scores");
  common(score);
  score->add_option("--corpus", o.corpus, "Scenario corpus")->required();
  score->add_option("--models", o.models, "Score with previously fitted tail models instead of fitting");
  score->add_option("--out", o.out, "Output directory (scores.csv, tail_models.json)")->required();

  auto* stats = app.add_subcommand("stats", "Head/tail cohort deviation statistics");
  common(stats);
  stats->add_option("--corpus", o.corpus, "Scenario corpus")->required();
  stats->add_option("--scores", o.scores, "Scores CSV")->required();
  stats->add_option("--quantile", o.quantile, "Cohort fraction")->capture_default_str();
  stats->add_option("--out", o.out, "Output cohort CSV")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  common(tr);
  tr->add_option("--corpus", o.corpus, "Scenario corpus (training split is used)")->required();
  tr->add_option("--scores", o.scores, "Scores CSV supplying S_tilde");
  tr->add_option("--out", o.out, "Output directory for checkpoints and logs")->required();
  tr->add_option("--ablate", o.ablate,
                 "no-ind, no-grp, no-mode-q, no-reg-q, no-tail-q, stream-order=dev-ctx|ctx-dev, layers=N");
  tr->add_option("--epochs", o.epochs, "Epochs");
  tr->add_option("--batch-size", o.batch_size, "Batch size");
  tr->add_option("--lr", o.lr, "Initial learning rate");
  tr->add_option("--alpha", o.alpha, "Tail loss weight");
  tr->add_option("--d", o.d, "Model width");
  tr->add_option("--heads", o.heads, "Attention heads");
  tr->add_option("--layers", o.layers, "Stack depth");
  tr->add_option("--modes", o.modes, "Predicted modes K");
  tr->add_option("--experts", o.experts, "MoE experts K_e");
  tr->add_option("--dropout", o.dropout, "Dropout rate");
  tr->add_flag("--no-tail-weighting", o.no_tail_weighting, "Train with S_tilde == 1");

  auto* pr = app.add_subcommand("predict", "Predict multimodal trajectories");
  common(pr);
  pr->add_option("--corpus", o.corpus, "Scenario corpus")->required();
  pr->add_option("--checkpoint", o.checkpoint, "Checkpoint file")->required();
  pr->add_option("--out", o.out, "Output prediction dump")->required();

  auto* ev = app.add_subcommand("eval", "Evaluate predictions");
  common(ev);
  ev->add_option("--corpus", o.corpus, "Scenario corpus with ground truth")->required();
  ev->add_option("--predictions", o.predictions, "Prediction dump")->required();
  ev->add_option("--scores", o.scores, "Scores CSV; enables tail slices");
  ev->add_option("--out", o.out, "Output report directory")->required();
  ev->add_flag("--conventional-brier", o.conventional_brier, "Use (1 - p_winner)^2 for b-minFDE");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << " (see --help)\n";
    return 1;
  }

  try {
    if (*gen) return run_gen(o);
    if (*score) return run_score(o);
    if (*stats) return run_stats(o);
    if (*tr) return run_train(o);
    if (*pr) return run_predict(o);
    if (*ev) return run_eval(o);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: malformed input: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
