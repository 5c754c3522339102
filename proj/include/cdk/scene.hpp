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

#ifndef CDK_SCENE_HPP_
#define CDK_SCENE_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cdk/provenance.hpp"
#include "cdk/rng.hpp"

namespace cdk {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const;
  bool operator==(const Vec2&) const = default;
};

double distance(Vec2 a, Vec2 b);
/// Wraps an angle to (-pi, pi].
double wrap_angle(double a);

struct Horizon {
  std::size_t t_obs = 20;
  std::size_t t_fut = 30;
  double hz = 10.0;

  static Horizon desk() { return {}; }
  static Horizon av2() { return {50, 60, 10.0}; }
  double dt() const { return 1.0 / hz; }
  bool operator==(const Horizon&) const = default;
};

enum class AgentKind { kTarget, kNeighbor };
enum class Split { kTrain, kVal, kTest };

std::string to_string(AgentKind kind);
std::string to_string(Split split);
Split parse_split(const std::string& s);

struct AgentTrack {
  std::vector<Vec2> positions;      // T_o
  std::vector<double> headings;     // T_o, radians
  std::vector<double> velocities;   // T_o, speed in m/s
  std::vector<std::uint8_t> mask;   // T_o, 1 = observed
  AgentKind kind = AgentKind::kNeighbor;
  std::vector<Vec2> future;         // T_f or empty; neighbor futures feed the group loss
  std::vector<Vec2> displacements;  // derived: positions[t] - positions[t-1], row 0 zero

  std::size_t valid_count() const;
  /// Fills masked steps (forward, leading steps backward) and recomputes displacements.
  void finalize();
};

struct MapPolyline {
  std::vector<Vec2> points;
  std::vector<Vec2> displacements;  // derived, row 0 zero

  Vec2 centroid() const;
  void finalize();
};

struct Scenario {
  std::string id;
  Split split = Split::kTrain;
  std::string label = "head";  // generator ground truth: head or a tail maneuver name
  Horizon horizon;
  std::vector<AgentTrack> agents;
  std::vector<MapPolyline> polylines;
  std::vector<Vec2> future;  // target ground truth, T_f or empty for test split

  std::size_t target_index() const;
  const AgentTrack& target() const { return agents.at(target_index()); }
  bool has_future() const { return !future.empty(); }
  bool is_tail() const { return label != "head"; }
};

/// Throws ValidationError naming the scenario id and field on the first violation.
void validate(const Scenario& s);

struct Corpus {
  Horizon horizon;
  Provenance provenance;
  std::vector<Scenario> scenarios;
};

Corpus load_scenarios(const std::filesystem::path& path);
void save_scenarios(const std::filesystem::path& path, const Corpus& corpus);
/// Canonical text form of one scenario record (no trailing newline).
std::string serialize_scenario(const Scenario& s);
Scenario parse_scenario(const std::string& line, const Horizon& horizon);

struct RigidTransform {
  double angle = 0.0;  // rotation applied first
  Vec2 shift;          // then translation
};
/// The transform used by normalize_frame.
RigidTransform normalizing_transform(const Scenario& s);

/// Rigid transform: target's last observed position to the origin, its last
/// heading to +x. A target with zero displacement over the window keeps the
/// identity rotation (translation still applies).
Scenario normalize_frame(const Scenario& s);
/// Applies rotation by `angle` then translation by `shift` to every geometric field.
Scenario transform_scenario(const Scenario& s, double angle, Vec2 shift);

struct GeneratorConfig {
  Horizon horizon;
  Split split = Split::kTrain;
  std::size_t min_neighbors = 2;
  std::size_t max_neighbors = 5;  // capped at 15 so N_a <= 16
  std::size_t polyline_points = 10;
  double min_speed = 7.0;
  double max_speed = 12.0;
  double position_noise = 0.01;
  double heading_noise = 0.005;
  double speed_noise = 0.05;
  double late_entry_prob = 0.2;  // chance a neighbor misses its first observed steps
  // Head scenarios stay below these individual-descriptor magnitudes.
  double head_max_heading_dev = 0.15;
  double head_max_speed_dev = 0.5;
  // Tail maneuvers to draw from; empty means all of tail_maneuvers().
  std::vector<std::string> maneuvers;

  nlohmann::json to_json() const;
  /// Inverse of to_json; every key is required.
  static GeneratorConfig from_json(const nlohmann::json& j);
};

inline const std::vector<std::string>& tail_maneuvers() {
  static const std::vector<std::string> kNames{"hard_brake", "turn", "lane_change", "stop_and_go"};
  return kNames;
}

/// Exactly round(n * tail_fraction) scenarios carry a tail maneuver.
std::vector<Scenario> generate_synthetic(std::size_t n, double tail_fraction, RngStream& rng,
                                         const GeneratorConfig& config = {});

}  // namespace cdk

#endif  // CDK_SCENE_HPP_
