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

#include "cdk/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cdk {

using nlohmann::json;

namespace {

constexpr std::uint64_t kInitKey = 0x1417;

}  // namespace

CdkFormer::CdkFormer(const ModelConfig& config, std::uint64_t seed)
    : config_(config), seed_(seed), store_(std::make_unique<ParamStore>()) {
  config_.validate();
  RngStream enc_rng = RngStream(seed).substream(kInitKey);
  RngStream dec_rng = RngStream(seed).substream(kInitKey + 1);
  encoder_ = SceneEncoder(*store_, config_, enc_rng);
  decoder_ = DualQueryDecoder(*store_, config_, dec_rng);
}

ModelOutput CdkFormer::forward(const ForwardCtx& ctx, const SceneInput& in) const {
  if (in.t_obs != config_.horizon.t_obs || in.t_fut != config_.horizon.t_fut)
    throw ValidationError("scenario " + in.id + ": horizon does not match the model");
  ModelOutput out;
  out.enc = encoder_(ctx, in);
  out.queries = decoder_.decode_dual_queries(ctx, out.enc);
  std::tie(out.dual, out.gamma) = decoder_.combine_queries(ctx, out.queries.regular, out.queries.tail);
  out.scene_query = DualQueryDecoder::build_scene_query(out.queries.mode, out.dual);
  out.scene = decoder_.refine_and_predict(ctx, out.scene_query, out.enc);
  out.aux = decoder_.auxiliary_heads(ctx, out.queries, out.enc.c_ctx, in);
  return out;
}

PredictionSet CdkFormer::predict(const SceneInput& in) const {
  Tape tape;
  ForwardCtx ctx{tape};
  const ModelOutput out = forward(ctx, in);
  const Tensor& traj = out.scene.trajectories.value();
  const Tensor& probs = out.scene.probs.value();
  PredictionSet p;
  p.id = in.id;
  const std::size_t k = config_.modes, tf = config_.horizon.t_fut;
  p.trajectories.assign(k, std::vector<Vec2>(tf));
  for (std::size_t m = 0; m < k; ++m)
    for (std::size_t t = 0; t < tf; ++t)
      p.trajectories[m][t] = in.to_world({traj.at(m * tf + t, 0), traj.at(m * tf + t, 1)});
  p.probs.assign(probs.storage().begin(), probs.storage().end());
  return p;
}

// ---- checkpoint -------------------------------------------------------------------

void save_checkpoint(const std::filesystem::path& path, const CdkFormer& model, const Provenance& provenance,
                     const json& meta) {
  json params = json::array();
  for (const auto& p : model.params()) params.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", p.offset}});
  const json manifest = {{"format", "cdk-checkpoint"},
                         {"version", 1},
                         {"provenance", provenance.to_json()},
                         {"model", model.config().to_json()},
                         {"init_seed", model.init_seed()},
                         {"total", model.params().total_size()},
                         {"params", params},
                         {"meta", meta}};
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << manifest.dump() << '\n';
    std::vector<unsigned char> buf;
    buf.reserve(model.params().total_size() * 8);
    for (const auto& p : model.params())
      for (double v : p.value.storage()) {
        const auto bits = std::bit_cast<std::uint64_t>(v);
        for (int b = 0; b < 8; ++b) buf.push_back(static_cast<unsigned char>(bits >> (8 * b)));
      }
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::unique_ptr<CdkFormer> load_checkpoint(const std::filesystem::path& path, json* meta) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(in, line);
  json manifest;
  try {
    manifest = json::parse(line);
  } catch (const json::exception&) {
    throw ValidationError(path.string() + ": not a checkpoint (bad manifest line)");
  }
  if (manifest.value("format", "") != "cdk-checkpoint" || manifest.value("version", 0) != 1)
    throw ValidationError(path.string() + ": unsupported checkpoint format or version");
  auto model = std::make_unique<CdkFormer>(ModelConfig::from_json(manifest.at("model")),
                                           manifest.at("init_seed").get<std::uint64_t>());
  const json& params = manifest.at("params");
  if (params.size() != model->params().count())
    throw ValidationError(path.string() + ": parameter count differs from the model config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Parameter& p = model->params()[i];
    if (params[i].at("name").get<std::string>() != p.name || params[i].at("shape").get<Shape>() != p.value.shape())
      throw ValidationError(path.string() + ": parameter '" + params[i].at("name").get<std::string>() +
                            "' does not match the model layout");
  }
  std::vector<unsigned char> buf(model->params().total_size() * 8);
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (static_cast<std::size_t>(in.gcount()) != buf.size() || in.peek() != std::char_traits<char>::eof())
    throw ValidationError(path.string() + ": payload size does not match the manifest");
  std::size_t at = 0;
  for (auto& p : model->params())
    for (double& v : p.value.storage()) {
      std::uint64_t bits = 0;
      for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[at++]) << (8 * b);
      v = std::bit_cast<double>(bits);
    }
  if (meta) *meta = manifest.value("meta", json::object());
  return model;
}

// ---- prediction dump ------------------------------------------------------------------

void write_predictions(const std::filesystem::path& path, const std::vector<PredictionSet>& preds,
                       const Provenance& provenance) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  json header = provenance.to_json();
  header["format"] = "cdk-predictions";
  header["version"] = 1;
  out << header.dump() << '\n';
  for (const auto& p : preds) {
    json traj = json::array();
    for (const auto& mode : p.trajectories) {
      json pts = json::array();
      for (const auto& v : mode) pts.push_back({v.x, v.y});
      traj.push_back(std::move(pts));
    }
    out << json{{"id", p.id}, {"probs", p.probs}, {"trajectories", traj}}.dump() << '\n';
  }
}

std::vector<PredictionSet> read_predictions(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open predictions " + path.string());
  std::string line;
  std::size_t lineno = 0;
  std::vector<PredictionSet> out;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      if (lineno == 1) {
        if (j.value("format", "") != "cdk-predictions") throw ValidationError(path.string() + ": not a prediction dump");
        continue;
      }
      PredictionSet p;
      p.id = j.at("id").get<std::string>();
      p.probs = j.at("probs").get<std::vector<double>>();
      for (const auto& mode : j.at("trajectories")) {
        std::vector<Vec2> pts;
        for (const auto& v : mode) pts.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
        p.trajectories.push_back(std::move(pts));
      }
      if (p.trajectories.size() != p.probs.size())
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": K differs between trajectories and probs");
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace cdk
