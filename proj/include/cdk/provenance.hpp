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

#ifndef CDK_PROVENANCE_HPP_
#define CDK_PROVENANCE_HPP_

#include <cstdint>
#include <string>
#include <string_view>

#include "json.hpp"

namespace cdk {

inline constexpr std::string_view kToolName = "cdkformer";
inline constexpr std::string_view kToolVersion = "0.1.0";

std::uint64_t fnv1a64(std::string_view bytes);
/// 16 lowercase hex digits of fnv1a64 over the compact JSON dump.
std::string config_hash(const nlohmann::json& config);

/// printf %.*g rendering used by every CSV artifact.
std::string format_double(double v, int precision = 12);

/// Stamp written at the top of every artifact.
struct Provenance {
  std::uint64_t seed = 0;
  nlohmann::json config = nlohmann::json::object();

  std::string hash() const { return config_hash(config); }
  nlohmann::json to_json() const;
  /// Single `#`-prefixed line for CSV artifacts (no trailing newline).
  std::string csv_comment() const;
};

}  // namespace cdk

#endif  // CDK_PROVENANCE_HPP_
