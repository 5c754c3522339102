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

#ifndef CDK_MODEL_CONFIG_HPP_
#define CDK_MODEL_CONFIG_HPP_

#include <string>

#include "cdk/scene.hpp"
#include "json.hpp"

namespace cdk {

enum class StreamOrder { kDeviationFirst, kContextFirst };

/// Component switches used by the ablation harness.
struct Ablation {
  bool individual = true;    // individual deviation stream
  bool group = true;         // group deviation stream
  bool mode_query = true;    // decoded mode query and its head
  bool regular_query = true;
  bool tail_query = true;
  StreamOrder stream_order = StreamOrder::kDeviationFirst;

  /// Applies one flag: no-ind, no-grp, no-mode-q, no-reg-q, no-tail-q,
  /// stream-order=dev-ctx|ctx-dev. `layers=N` is handled by ModelConfig.
  void apply(const std::string& flag);
  nlohmann::json to_json() const;
  static Ablation from_json(const nlohmann::json& j);
};

struct ModelConfig {
  Horizon horizon;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t layers = 2;        // encoder and decoder stack depth
  std::size_t modes = 6;         // K
  std::size_t experts = 8;       // K_e
  std::size_t expert_hidden = 64;
  std::size_t ffn_hidden = 128;
  std::size_t fourier_bands = 4;
  double dropout = 0.1;
  double position_scale = 20.0;  // meters per unit before embedding
  double speed_scale = 10.0;     // m/s per unit before embedding
  Ablation ablation;

  void validate() const;
  /// Handles layers=N itself and forwards every other flag to Ablation.
  void apply_ablation(const std::string& flag);
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

}  // namespace cdk

#endif  // CDK_MODEL_CONFIG_HPP_
