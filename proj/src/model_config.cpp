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

#include "cdk/model_config.hpp"

#include "cdk/tensor.hpp"

namespace cdk {

using nlohmann::json;

void Ablation::apply(const std::string& flag) {
  if (flag == "no-ind") {
    individual = false;
  } else if (flag == "no-grp") {
    group = false;
  } else if (flag == "no-mode-q") {
    mode_query = false;
  } else if (flag == "no-reg-q") {
    regular_query = false;
  } else if (flag == "no-tail-q") {
    tail_query = false;
  } else if (flag == "stream-order=dev-ctx") {
    stream_order = StreamOrder::kDeviationFirst;
  } else if (flag == "stream-order=ctx-dev") {
    stream_order = StreamOrder::kContextFirst;
  } else {
    throw ValidationError("unknown ablation '" + flag +
                          "' (use no-ind, no-grp, no-mode-q, no-reg-q, no-tail-q, "
                          "stream-order=dev-ctx|ctx-dev, layers=N)");
  }
  if (!regular_query && !tail_query)
    throw ValidationError("ablation: no-reg-q and no-tail-q together leave no future query");
}

json Ablation::to_json() const {
  return {{"individual", individual},
          {"group", group},
          {"mode_query", mode_query},
          {"regular_query", regular_query},
          {"tail_query", tail_query},
          {"stream_order", stream_order == StreamOrder::kDeviationFirst ? "dev-ctx" : "ctx-dev"}};
}

Ablation Ablation::from_json(const json& j) {
  Ablation a;
  a.individual = j.value("individual", true);
  a.group = j.value("group", true);
  a.mode_query = j.value("mode_query", true);
  a.regular_query = j.value("regular_query", true);
  a.tail_query = j.value("tail_query", true);
  const std::string order = j.value("stream_order", "dev-ctx");
  if (order != "dev-ctx" && order != "ctx-dev") throw ValidationError("ablation: bad stream_order '" + order + "'");
  a.stream_order = order == "dev-ctx" ? StreamOrder::kDeviationFirst : StreamOrder::kContextFirst;
  if (!a.regular_query && !a.tail_query)
    throw ValidationError("ablation: at least one future query must stay enabled");
  return a;
}

void ModelConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ValidationError("model config: " + what);
  };
  need(d >= 1 && heads >= 1 && d % heads == 0, "d must be a positive multiple of heads");
  need(layers >= 1 && layers <= 8, "layers must be in 1..8");
  need(modes >= 1, "modes must be >= 1");
  need(experts >= 1, "experts must be >= 1");
  need(expert_hidden >= 1 && ffn_hidden >= 1, "hidden widths must be >= 1");
  need(fourier_bands >= 1 && fourier_bands <= 16, "fourier_bands must be in 1..16");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(position_scale > 0.0 && speed_scale > 0.0, "feature scales must be positive");
  need(horizon.t_obs >= 2 && horizon.t_fut >= 1 && horizon.hz > 0.0, "invalid horizon");
}

void ModelConfig::apply_ablation(const std::string& flag) {
  if (flag.rfind("layers=", 0) == 0) {
    try {
      std::size_t used = 0;
      const long v = std::stol(flag.substr(7), &used);
      if (used != flag.size() - 7 || v < 1 || v > 3) throw std::invalid_argument("range");
      layers = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ValidationError("ablation layers=N needs N in 1..3, got '" + flag + "'");
    }
    return;
  }
  ablation.apply(flag);
}

json ModelConfig::to_json() const {
  return {{"t_obs", horizon.t_obs},
          {"t_fut", horizon.t_fut},
          {"hz", horizon.hz},
          {"d", d},
          {"heads", heads},
          {"layers", layers},
          {"modes", modes},
          {"experts", experts},
          {"expert_hidden", expert_hidden},
          {"ffn_hidden", ffn_hidden},
          {"fourier_bands", fourier_bands},
          {"dropout", dropout},
          {"position_scale", position_scale},
          {"speed_scale", speed_scale},
          {"ablation", ablation.to_json()}};
}

ModelConfig ModelConfig::from_json(const json& j) {
  ModelConfig c;
  try {
    c.horizon.t_obs = j.value("t_obs", c.horizon.t_obs);
    c.horizon.t_fut = j.value("t_fut", c.horizon.t_fut);
    c.horizon.hz = j.value("hz", c.horizon.hz);
    c.d = j.value("d", c.d);
    c.heads = j.value("heads", c.heads);
    c.layers = j.value("layers", c.layers);
    c.modes = j.value("modes", c.modes);
    c.experts = j.value("experts", c.experts);
    c.expert_hidden = j.value("expert_hidden", c.expert_hidden);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.fourier_bands = j.value("fourier_bands", c.fourier_bands);
    c.dropout = j.value("dropout", c.dropout);
    c.position_scale = j.value("position_scale", c.position_scale);
    c.speed_scale = j.value("speed_scale", c.speed_scale);
    if (j.contains("ablation")) c.ablation = Ablation::from_json(j.at("ablation"));
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace cdk
