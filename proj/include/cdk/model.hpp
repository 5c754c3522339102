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

#ifndef CDK_MODEL_HPP_
#define CDK_MODEL_HPP_

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "cdk/decoder.hpp"
#include "cdk/encoder.hpp"
#include "cdk/provenance.hpp"

namespace cdk {

struct ModelOutput {
  EncodedScene enc;
  DecodedQueries queries;
  Var dual;         // T_f x d
  Var gamma;        // T_f x d, invalid when a future query is ablated
  Var scene_query;  // (K*T_f) x d
  MultimodalHead scene;
  AuxiliaryOutputs aux;
};

/// Final multimodal forecast for one scenario in the scenario's own frame.
struct PredictionSet {
  std::string id;
  std::vector<std::vector<Vec2>> trajectories;  // K x T_f
  std::vector<double> probs;                    // K
};

class CdkFormer {
 public:
  CdkFormer(const ModelConfig& config, std::uint64_t seed);
  CdkFormer(const CdkFormer&) = delete;
  CdkFormer& operator=(const CdkFormer&) = delete;

  const ModelConfig& config() const { return config_; }
  std::uint64_t init_seed() const { return seed_; }
  ParamStore& params() { return *store_; }
  const ParamStore& params() const { return *store_; }
  const SceneEncoder& encoder() const { return encoder_; }
  const DualQueryDecoder& decoder() const { return decoder_; }

  ModelOutput forward(const ForwardCtx& ctx, const SceneInput& in) const;
  /// Inference without dropout; trajectories mapped back to the scenario frame.
  PredictionSet predict(const SceneInput& in) const;

 private:
  ModelConfig config_;
  std::uint64_t seed_;
  std::unique_ptr<ParamStore> store_;
  SceneEncoder encoder_;
  DualQueryDecoder decoder_;
};

/// One JSON manifest line (config, parameter names, shapes, offsets) followed
/// by every parameter value as little-endian IEEE-754 doubles.
void save_checkpoint(const std::filesystem::path& path, const CdkFormer& model, const Provenance& provenance,
                     const nlohmann::json& meta = nlohmann::json::object());
std::unique_ptr<CdkFormer> load_checkpoint(const std::filesystem::path& path, nlohmann::json* meta = nullptr);

void write_predictions(const std::filesystem::path& path, const std::vector<PredictionSet>& preds,
                       const Provenance& provenance);
std::vector<PredictionSet> read_predictions(const std::filesystem::path& path);

}  // namespace cdk

#endif  // CDK_MODEL_HPP_
