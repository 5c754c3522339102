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

#include "cdk/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "cdk/tensor.hpp"

namespace cdk {

using nlohmann::json;

double Vec2::norm() const { return std::hypot(x, y); }

double distance(Vec2 a, Vec2 b) { return (a - b).norm(); }

double wrap_angle(double a) {
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  double r = std::remainder(a, kTwoPi);
  if (r <= -std::numbers::pi) r += kTwoPi;
  return r;
}

std::string to_string(AgentKind kind) { return kind == AgentKind::kTarget ? "target" : "neighbor"; }

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw ValidationError("unknown split '" + s + "' (expected train, val or test)");
}

std::size_t AgentTrack::valid_count() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto m) { return m != 0; }));
}

void AgentTrack::finalize() {
  const std::size_t n = positions.size();
  std::size_t first = n;
  for (std::size_t t = 0; t < n; ++t)
    if (mask[t]) {
      first = t;
      break;
    }
  if (first < n) {
    for (std::size_t t = 0; t < first; ++t) {
      positions[t] = positions[first];
      headings[t] = headings[first];
      velocities[t] = velocities[first];
    }
    for (std::size_t t = first + 1; t < n; ++t) {
      if (mask[t]) continue;
      positions[t] = positions[t - 1];
      headings[t] = headings[t - 1];
      velocities[t] = velocities[t - 1];
    }
  }
  displacements.assign(n, Vec2{});
  for (std::size_t t = 1; t < n; ++t)
    if (mask[t] && mask[t - 1]) displacements[t] = positions[t] - positions[t - 1];
}

Vec2 MapPolyline::centroid() const {
  Vec2 c;
  for (const auto& p : points) c = c + p;
  return points.empty() ? c : c * (1.0 / static_cast<double>(points.size()));
}

void MapPolyline::finalize() {
  displacements.assign(points.size(), Vec2{});
  for (std::size_t i = 1; i < points.size(); ++i) displacements[i] = points[i] - points[i - 1];
}

std::size_t Scenario::target_index() const {
  for (std::size_t i = 0; i < agents.size(); ++i)
    if (agents[i].kind == AgentKind::kTarget) return i;
  throw ValidationError("scenario " + id + ": no target agent");
}

namespace {

[[noreturn]] void fail(const Scenario& s, const std::string& field, const std::string& what) {
  throw ValidationError("scenario " + (s.id.empty() ? std::string("<no id>") : s.id) + ": " +
                        field + ": " + what);
}

bool finite(Vec2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

void check_points(const Scenario& s, const std::string& field, const std::vector<Vec2>& pts) {
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (!finite(pts[i])) fail(s, field + "[" + std::to_string(i) + "]", "non-finite value");
}

}  // namespace

void validate(const Scenario& s) {
  if (s.id.empty()) fail(s, "id", "empty");
  if (s.agents.empty()) fail(s, "agents", "N_a = 0, need at least one agent");
  const std::size_t to = s.horizon.t_obs, tf = s.horizon.t_fut;
  std::size_t targets = 0;
  for (std::size_t i = 0; i < s.agents.size(); ++i) {
    const AgentTrack& a = s.agents[i];
    const std::string f = "agents[" + std::to_string(i) + "]";
    if (a.kind == AgentKind::kTarget) ++targets;
    if (a.positions.size() != to || a.headings.size() != to || a.velocities.size() != to ||
        a.mask.size() != to) {
      fail(s, f, "observed arrays must all have length t_obs = " + std::to_string(to));
    }
    if (!a.future.empty() && a.future.size() != tf)
      fail(s, f + ".future", "length must be t_fut = " + std::to_string(tf) + " or 0");
    if (a.valid_count() == 0) fail(s, f + ".mask", "no observed step");
    check_points(s, f + ".positions", a.positions);
    check_points(s, f + ".future", a.future);
    for (std::size_t t = 0; t < to; ++t) {
      if (!std::isfinite(a.headings[t])) fail(s, f + ".headings", "non-finite value");
      if (!std::isfinite(a.velocities[t])) fail(s, f + ".velocities", "non-finite value");
    }
  }
  if (targets != 1) fail(s, "agents", "exactly one target required, found " + std::to_string(targets));
  if (!s.target().mask.back()) fail(s, "agents.mask", "target's last observed step is masked");
  for (std::size_t i = 0; i < s.polylines.size(); ++i) {
    const auto& pl = s.polylines[i];
    const std::string f = "polylines[" + std::to_string(i) + "]";
    if (pl.points.size() < 2) fail(s, f + ".points", "need at least 2 points");
    check_points(s, f + ".points", pl.points);
  }
  const bool needs_future = s.split != Split::kTest;
  if (needs_future && s.future.size() != tf)
    fail(s, "future", "train/val scenarios need t_fut = " + std::to_string(tf) + " points");
  if (!needs_future && !s.future.empty()) fail(s, "future", "test scenarios carry no future");
  check_points(s, "future", s.future);
}

// ---- serialization ---------------------------------------------------------------

namespace {

json points_json(const std::vector<Vec2>& pts) {
  json arr = json::array();
  for (const auto& p : pts) arr.push_back({p.x, p.y});
  return arr;
}

template <typename Fn>
auto field(const Scenario& s, const std::string& name, Fn&& fn) {
  try {
    return fn();
  } catch (const ValidationError&) {
    throw;
  } catch (const std::exception& e) {
    fail(s, name, e.what());
  }
}

std::vector<Vec2> parse_points(const Scenario& s, const json& j, const std::string& name) {
  return field(s, name, [&] {
    std::vector<Vec2> out;
    for (const auto& p : j.at(name)) {
      if (!p.is_array() || p.size() != 2) throw ValidationError("scenario " + s.id + ": " + name + ": points must be [x, y] pairs");
      out.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    }
    return out;
  });
}

}  // namespace

std::string serialize_scenario(const Scenario& s) {
  json agents = json::array();
  for (const auto& a : s.agents) {
    json ja = {{"kind", to_string(a.kind)},
               {"positions", points_json(a.positions)},
               {"headings", a.headings},
               {"velocities", a.velocities},
               {"mask", a.mask}};
    if (!a.future.empty()) ja["future"] = points_json(a.future);
    agents.push_back(std::move(ja));
  }
  json polylines = json::array();
  for (const auto& pl : s.polylines) polylines.push_back({{"points", points_json(pl.points)}});
  json j = {{"id", s.id},
            {"split", to_string(s.split)},
            {"label", s.label},
            {"agents", std::move(agents)},
            {"polylines", std::move(polylines)},
            {"future", points_json(s.future)}};
  return j.dump();
}

Scenario parse_scenario(const std::string& line, const Horizon& horizon) {
  Scenario s;
  s.horizon = horizon;
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("parse error: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("scenario record is not a JSON object");
  s.id = field(s, "id", [&] { return j.at("id").get<std::string>(); });
  s.split = field(s, "split", [&] { return parse_split(j.value("split", std::string("train"))); });
  s.label = field(s, "label", [&] { return j.value("label", std::string("head")); });
  if (!j.contains("agents") || !j.at("agents").is_array()) fail(s, "agents", "missing array");
  for (std::size_t i = 0; i < j.at("agents").size(); ++i) {
    const json& ja = j.at("agents")[i];
    const std::string f = "agents[" + std::to_string(i) + "]";
    AgentTrack a;
    const std::string kind = field(s, f + ".kind", [&] { return ja.at("kind").get<std::string>(); });
    if (kind == "target") {
      a.kind = AgentKind::kTarget;
    } else if (kind == "neighbor") {
      a.kind = AgentKind::kNeighbor;
    } else {
      fail(s, f + ".kind", "expected target or neighbor, got '" + kind + "'");
    }
    a.positions = parse_points(s, ja, "positions");
    a.headings = field(s, f + ".headings", [&] { return ja.at("headings").get<std::vector<double>>(); });
    a.velocities = field(s, f + ".velocities", [&] { return ja.at("velocities").get<std::vector<double>>(); });
    a.mask = field(s, f + ".mask", [&] {
      std::vector<std::uint8_t> m;
      for (const auto& v : ja.at("mask")) m.push_back(v.is_boolean() ? v.get<bool>() : v.get<int>() != 0);
      return m;
    });
    if (ja.contains("future")) a.future = parse_points(s, ja, "future");
    if (a.positions.size() == a.mask.size() && a.headings.size() == a.mask.size() &&
        a.velocities.size() == a.mask.size())
      a.finalize();
    s.agents.push_back(std::move(a));
  }
  if (j.contains("polylines")) {
    for (const auto& jp : j.at("polylines")) {
      MapPolyline pl;
      pl.points = parse_points(s, jp, "points");
      pl.finalize();
      s.polylines.push_back(std::move(pl));
    }
  }
  if (j.contains("future") && !j.at("future").is_null()) s.future = parse_points(s, j, "future");
  validate(s);
  return s;
}

Corpus load_scenarios(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open corpus file " + path.string());
  Corpus corpus;
  bool have_header = false;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json probe;
    try {
      probe = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": parse error: " + e.what());
    }
    if (probe.is_object() && probe.contains("format")) {
      if (probe.at("format") != "cdk-scn") {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": unknown format");
      }
      if (probe.value("version", 0) != 1)
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": unsupported version");
      Horizon h;
      try {
        h = {probe.at("t_obs").get<std::size_t>(), probe.at("t_fut").get<std::size_t>(),
             probe.at("hz").get<double>()};
      } catch (const json::exception& e) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": bad header: " + e.what());
      }
      if (h.t_obs < 2 || h.t_fut < 1 || !(h.hz > 0.0))
        throw ValidationError(path.string() + ": header horizon out of range");
      if (have_header && !(h == corpus.horizon)) {
        throw ValidationError(path.string() + ":" + std::to_string(lineno) +
                              ": mixed horizon configs in one corpus");
      }
      if (!have_header) {
        corpus.horizon = h;
        corpus.provenance.seed = probe.value("seed", std::uint64_t{0});
        corpus.provenance.config = probe.value("config", json::object());
      }
      have_header = true;
      continue;
    }
    if (!have_header) throw ValidationError(path.string() + ": first record must be the cdk-scn header");
    try {
      corpus.scenarios.push_back(parse_scenario(line, corpus.horizon));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return corpus;
}

void save_scenarios(const std::filesystem::path& path, const Corpus& corpus) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file " + path.string());
  json header = corpus.provenance.to_json();
  header["format"] = "cdk-scn";
  header["version"] = 1;
  header["t_obs"] = corpus.horizon.t_obs;
  header["t_fut"] = corpus.horizon.t_fut;
  header["hz"] = corpus.horizon.hz;
  out << header.dump() << '\n';
  for (const auto& s : corpus.scenarios) out << serialize_scenario(s) << '\n';
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

// ---- geometry -------------------------------------------------------------------

Scenario transform_scenario(const Scenario& s, double angle, Vec2 shift) {
  const double c = std::cos(angle), sn = std::sin(angle);
  auto rot = [&](Vec2 p) { return Vec2{c * p.x - sn * p.y, sn * p.x + c * p.y}; };
  auto move = [&](Vec2 p) { return rot(p) + shift; };
  Scenario out = s;
  for (auto& a : out.agents) {
    for (auto& p : a.positions) p = move(p);
    for (auto& p : a.future) p = move(p);
    for (auto& h : a.headings) h = wrap_angle(h + angle);
    a.finalize();
  }
  for (auto& pl : out.polylines) {
    for (auto& p : pl.points) p = move(p);
    pl.finalize();
  }
  for (auto& p : out.future) p = move(p);
  return out;
}

RigidTransform normalizing_transform(const Scenario& s) {
  const AgentTrack& tgt = s.target();
  if (!tgt.mask.back()) fail(s, "agents.mask", "target's last observed step is masked");
  const Vec2 last = tgt.positions.back();
  bool moved = false;
  for (std::size_t t = 0; t < tgt.positions.size(); ++t)
    if (tgt.mask[t] && !(tgt.positions[t] == last)) moved = true;
  const double angle = moved ? -tgt.headings.back() : 0.0;
  const double c = std::cos(angle), sn = std::sin(angle);
  return {angle, {-(c * last.x - sn * last.y), -(sn * last.x + c * last.y)}};
}

Scenario normalize_frame(const Scenario& s) {
  const RigidTransform tf = normalizing_transform(s);
  return transform_scenario(s, tf.angle, tf.shift);
}

// ---- synthetic generator ------------------------------------------------------------

json GeneratorConfig::to_json() const {
  return {{"t_obs", horizon.t_obs},
          {"t_fut", horizon.t_fut},
          {"hz", horizon.hz},
          {"split", to_string(split)},
          {"min_neighbors", min_neighbors},
          {"max_neighbors", max_neighbors},
          {"polyline_points", polyline_points},
          {"min_speed", min_speed},
          {"max_speed", max_speed},
          {"position_noise", position_noise},
          {"heading_noise", heading_noise},
          {"speed_noise", speed_noise},
          {"late_entry_prob", late_entry_prob},
          {"head_max_heading_dev", head_max_heading_dev},
          {"head_max_speed_dev", head_max_speed_dev},
          {"maneuvers", maneuvers}};
}

GeneratorConfig GeneratorConfig::from_json(const json& j) {
  GeneratorConfig c;
  c.horizon = {j.at("t_obs").get<std::size_t>(), j.at("t_fut").get<std::size_t>(), j.at("hz").get<double>()};
  c.split = parse_split(j.at("split").get<std::string>());
  c.min_neighbors = j.at("min_neighbors").get<std::size_t>();
  c.max_neighbors = j.at("max_neighbors").get<std::size_t>();
  c.polyline_points = j.at("polyline_points").get<std::size_t>();
  c.min_speed = j.at("min_speed").get<double>();
  c.max_speed = j.at("max_speed").get<double>();
  c.position_noise = j.at("position_noise").get<double>();
  c.heading_noise = j.at("heading_noise").get<double>();
  c.speed_noise = j.at("speed_noise").get<double>();
  c.late_entry_prob = j.at("late_entry_prob").get<double>();
  c.head_max_heading_dev = j.at("head_max_heading_dev").get<double>();
  c.head_max_speed_dev = j.at("head_max_speed_dev").get<double>();
  c.maneuvers = j.at("maneuvers").get<std::vector<std::string>>();
  return c;
}

namespace {

constexpr double kLaneWidth = 3.5;

struct KinState {
  double x, y, psi, v;
};

// Per-step longitudinal acceleration and yaw rate for one maneuver.
struct Profile {
  std::vector<double> accel, yaw_rate;
};

std::vector<KinState> integrate(KinState s, const Profile& p, double dt) {
  std::vector<KinState> out{s};
  for (std::size_t t = 1; t < p.accel.size(); ++t) {
    s.v = std::max(0.0, s.v + p.accel[t] * dt);
    s.psi += p.yaw_rate[t] * dt;
    s.x += s.v * std::cos(s.psi) * dt;
    s.y += s.v * std::sin(s.psi) * dt;
    out.push_back(s);
  }
  return out;
}

Profile make_profile(const std::string& label, std::size_t steps, std::size_t t_obs, double v0,
                     double dt, RngStream& rng) {
  Profile p{std::vector<double>(steps, 0.0), std::vector<double>(steps, 0.0)};
  if (label == "head") return p;
  const auto onset = static_cast<std::size_t>(
      std::clamp<long>(static_cast<long>(t_obs) - 8 + static_cast<long>(rng.below(14)), 2,
                       static_cast<long>(steps) - 5));
  if (label == "hard_brake") {
    const double decel = rng.uniform(4.0, 7.0);
    const double floor_v = rng.uniform(0.0, 2.0);
    double v = v0;
    for (std::size_t t = onset; t < steps && v > floor_v; ++t) {
      p.accel[t] = -decel;
      v -= decel * dt;
    }
  } else if (label == "turn") {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double delta = rng.uniform(std::numbers::pi / 4.0, std::numbers::pi / 2.0);
    const std::size_t dur = 15 + rng.below(11);
    for (std::size_t t = onset; t < std::min(steps, onset + dur); ++t) {
      p.yaw_rate[t] = sign * delta / (static_cast<double>(dur) * dt);
      p.accel[t] = -1.0;
    }
  } else if (label == "lane_change") {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const std::size_t dur = 20 + rng.below(11);
    const double span = static_cast<double>(dur) * dt;
    const double amp = 2.0 * std::numbers::pi * kLaneWidth / (v0 * span * span);
    for (std::size_t t = onset; t < std::min(steps, onset + dur); ++t) {
      const double tau = static_cast<double>(t - onset) / static_cast<double>(dur);
      p.yaw_rate[t] = sign * amp * std::sin(2.0 * std::numbers::pi * tau);
    }
  } else if (label == "stop_and_go") {
    const double decel = rng.uniform(3.0, 5.0);
    const double accel = rng.uniform(2.0, 3.0);
    const std::size_t hold = 5 + rng.below(6);
    double v = v0;
    std::size_t t = onset;
    for (; t < steps && v > 0.0; ++t) {
      p.accel[t] = -decel;
      v -= decel * dt;
    }
    t += hold;
    v = 0.0;
    for (; t < steps && v < v0; ++t) {
      p.accel[t] = accel;
      v += accel * dt;
    }
  } else {
    throw ValidationError("unknown maneuver " + label);
  }
  return p;
}

// Splits a noisy rendering of a kinematic path into observed track and future.
AgentTrack render_track(const std::vector<KinState>& path, std::size_t t_obs, AgentKind kind,
                        const GeneratorConfig& cfg, RngStream& rng) {
  AgentTrack a;
  a.kind = kind;
  for (std::size_t t = 0; t < path.size(); ++t) {
    const Vec2 p{path[t].x + rng.normal(0.0, cfg.position_noise),
                 path[t].y + rng.normal(0.0, cfg.position_noise)};
    if (t < t_obs) {
      a.positions.push_back(p);
      a.headings.push_back(wrap_angle(path[t].psi + rng.normal(0.0, cfg.heading_noise)));
      a.velocities.push_back(std::max(0.0, path[t].v + rng.normal(0.0, cfg.speed_noise)));
      a.mask.push_back(1);
    } else {
      a.future.push_back(p);
    }
  }
  return a;
}

MapPolyline straight_lane(double lateral, double s0, double s1, std::size_t n) {
  MapPolyline pl;
  for (std::size_t i = 0; i < n; ++i) {
    const double s = s0 + (s1 - s0) * static_cast<double>(i) / static_cast<double>(n - 1);
    pl.points.push_back({s, lateral});
  }
  return pl;
}

// Resamples a path to n points evenly spaced in index.
MapPolyline path_polyline(const std::vector<KinState>& path, std::size_t begin, std::size_t end,
                          std::size_t n) {
  MapPolyline pl;
  for (std::size_t i = 0; i < n; ++i) {
    const double u = static_cast<double>(begin) +
                     static_cast<double>(end - 1 - begin) * static_cast<double>(i) / static_cast<double>(n - 1);
    const auto lo = static_cast<std::size_t>(std::floor(u));
    const std::size_t hi = std::min(lo + 1, end - 1);
    const double w = u - static_cast<double>(lo);
    pl.points.push_back({path[lo].x * (1 - w) + path[hi].x * w, path[lo].y * (1 - w) + path[hi].y * w});
  }
  return pl;
}

MapPolyline arc_polyline(double s_branch, double radius, double sign, std::size_t n) {
  MapPolyline pl;
  for (std::size_t i = 0; i < n; ++i) {
    const double a = (std::numbers::pi / 2.0) * static_cast<double>(i) / static_cast<double>(n - 1);
    pl.points.push_back({s_branch + radius * std::sin(a), sign * radius * (1.0 - std::cos(a))});
  }
  return pl;
}

Scenario make_scenario(std::size_t index, const std::string& label, const GeneratorConfig& cfg,
                       RngStream rng) {
  const Horizon& h = cfg.horizon;
  const std::size_t steps = h.t_obs + h.t_fut;
  const double dt = h.dt();
  Scenario s;
  char id[32];
  std::snprintf(id, sizeof(id), "syn-%06zu", index);
  s.id = id;
  s.split = cfg.split;
  s.label = label;
  s.horizon = h;

  const double v0 = rng.uniform(cfg.min_speed, cfg.max_speed);
  const Profile prof = make_profile(label, steps, h.t_obs, v0, dt, rng);
  const std::vector<KinState> path = integrate({0.0, 0.0, 0.0, v0}, prof, dt);
  AgentTrack target = render_track(path, h.t_obs, AgentKind::kTarget, cfg, rng);
  s.future = std::move(target.future);
  target.future.clear();
  s.agents.push_back(std::move(target));

  const std::size_t max_nb = std::min<std::size_t>(cfg.max_neighbors, 15);
  const std::size_t min_nb = std::min(cfg.min_neighbors, max_nb);
  const std::size_t n_nb = min_nb + rng.below(max_nb - min_nb + 1);
  const double horizon_len = cfg.max_speed * static_cast<double>(steps) * dt;
  for (std::size_t k = 0; k < n_nb; ++k) {
    const bool oncoming = rng.uniform() < 0.15;
    double lateral = oncoming ? 2.0 * kLaneWidth : kLaneWidth * (static_cast<double>(rng.below(3)) - 1.0);
    double start = 0.0;
    for (int tries = 0; tries < 20; ++tries) {
      start = rng.uniform(-30.0, 40.0);
      if (lateral != 0.0 || std::abs(start) > 8.0) break;
    }
    if (lateral == 0.0 && std::abs(start) <= 8.0) lateral = kLaneWidth;
    const double speed = lateral == 0.0 ? std::max(0.5, v0 + rng.uniform(-2.0, 2.0))
                                        : rng.uniform(cfg.min_speed, cfg.max_speed);
    KinState st{start, lateral, 0.0, speed};
    if (oncoming) {
      st.x = rng.uniform(0.0, horizon_len);
      st.psi = std::numbers::pi;
    }
    const Profile flat{std::vector<double>(steps, 0.0), std::vector<double>(steps, 0.0)};
    AgentTrack nb = render_track(integrate(st, flat, dt), h.t_obs, AgentKind::kNeighbor, cfg, rng);
    if (rng.uniform() < cfg.late_entry_prob) {
      const std::size_t missing = 1 + rng.below(h.t_obs / 2);
      for (std::size_t t = 0; t < missing; ++t) nb.mask[t] = 0;
    }
    if (cfg.split == Split::kTest) nb.future.clear();
    s.agents.push_back(std::move(nb));
  }
  for (auto& a : s.agents) a.finalize();

  const std::size_t lp = std::max<std::size_t>(cfg.polyline_points, 2);
  const double s0 = -20.0, s1 = horizon_len + 20.0;
  for (double lat : {-kLaneWidth, 0.0, kLaneWidth, 2.0 * kLaneWidth})
    s.polylines.push_back(straight_lane(lat, s0, s1, lp));
  if (label == "turn") {
    std::size_t onset = 0;
    while (onset + 1 < steps && prof.yaw_rate[onset] == 0.0) ++onset;
    s.polylines.push_back(path_polyline(path, onset > 0 ? onset - 1 : 0, steps, lp));
  } else {
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    s.polylines.push_back(arc_polyline(rng.uniform(10.0, horizon_len * 0.7), rng.uniform(15.0, 30.0), sign, lp));
  }
  for (auto& pl : s.polylines) pl.finalize();
  if (cfg.split == Split::kTest) s.future.clear();

  const double angle = rng.uniform(-std::numbers::pi, std::numbers::pi);
  const Vec2 shift{rng.uniform(-500.0, 500.0), rng.uniform(-500.0, 500.0)};
  Scenario out = transform_scenario(s, angle, shift);
  validate(out);
  return out;
}

}  // namespace

std::vector<Scenario> generate_synthetic(std::size_t n, double tail_fraction, RngStream& rng,
                                         const GeneratorConfig& config) {
  if (n == 0) throw ValidationError("generate_synthetic: n must be >= 1");
  if (!(tail_fraction >= 0.0 && tail_fraction <= 1.0))
    throw ValidationError("generate_synthetic: tail_fraction must be in [0, 1]");
  const auto n_tail = static_cast<std::size_t>(std::llround(static_cast<double>(n) * tail_fraction));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < n_tail; ++i) std::swap(order[i], order[i + rng.below(n - i)]);
  const auto& pool = config.maneuvers.empty() ? tail_maneuvers() : config.maneuvers;
  for (const auto& m : pool)
    if (std::find(tail_maneuvers().begin(), tail_maneuvers().end(), m) == tail_maneuvers().end())
      throw ValidationError("unknown tail maneuver '" + m + "'");
  std::vector<std::string> labels(n, "head");
  for (std::size_t i = 0; i < n_tail; ++i) labels[order[i]] = pool[rng.below(pool.size())];
  const std::uint64_t base = rng.next_u64();
  std::vector<Scenario> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_scenario(i, labels[i], config, RngStream(base).substream(i)));
  return out;
}

}  // namespace cdk
