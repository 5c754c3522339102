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

#include "cdk/provenance.hpp"

#include <cstdio>

namespace cdk {

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const nlohmann::json& config) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(config.dump())));
  return buf;
}

std::string format_double(double v, int precision) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
  return buf;
}

nlohmann::json Provenance::to_json() const {
  return {{"tool", std::string(kToolName)},
          {"version", std::string(kToolVersion)},
          {"seed", seed},
          {"config_hash", hash()},
          {"config", config}};
}

std::string Provenance::csv_comment() const {
  return "# " + to_json().dump();
}

}  // namespace cdk
