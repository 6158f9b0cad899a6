#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "afm/geometry.hpp"
#include "afm/models.hpp"
#include "afm/scene.hpp"

namespace afm {

struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;
  double speed = 0.0;

  Pose2 pose() const { return {x, y, heading}; }
};

struct VehicleParams {
  double dt = 0.1;
  double wheelbase = 2.5;
  double steer_max = 0.5;
  double target_speed = 5.0;
  double speed_gain = 1.0;  // P gain, 1/s
  double accel_limit = 3.0;
};

// Kinematic bicycle with the arc integrated exactly over dt at constant
// steer and speed; speed is then updated and clamped at zero.
VehicleState bicycle_step(const VehicleState& s, double steer, double accel, double dt, double wheelbase = 2.5,
                          double steer_max = 0.5);

struct ScenarioSegment {
  double s_begin = 0.0;
  double s_end = 0.0;
  std::size_t step_budget = 0;  // steps allowed between entering and clearing
};

struct RouteSpec {
  std::uint64_t seed = 0;
  Polyline centerline;  // extends past `length` so the camera always sees road
  double length = 0.0;
  double half_width = 1.5;
  double lighting = 1.0;
  std::vector<WorldBox> obstacles;
  std::vector<ScenarioSegment> scenarios;
  std::size_t max_steps = 0;
  std::size_t blocked_window = 50;
  double blocked_distance = 0.5;
  std::size_t offroad_patience = 1;  // consecutive steps off the pavement before off_road registers
  double deviation_factor = 3.0;

  RoadScene scene() const;
};

// Fixed-seed routes; route 0 is straight and obstacle-free.
std::vector<RouteSpec> make_routes(std::size_t count = 10, std::uint64_t seed = 2024);
RouteSpec straight_route(double length = 80.0, double half_width = 1.5);

enum class Terminal : std::uint8_t {
  Completed,
  OffRoad,
  Collision,
  Blocked,
  RouteDeviation,
  ScenarioTimeout,
  RouteTimeout,
};
inline constexpr std::size_t kTerminalCount = 7;
const char* terminal_name(Terminal t);

struct StepRecord {
  std::size_t step = 0;
  VehicleState state;
  std::uint64_t frame_hash = 0;
  bool attacked = false;
  Trajectory waypoints;
  double steer = 0.0;
};

struct EpisodeLog {
  std::uint64_t route_seed = 0;
  std::vector<StepRecord> steps;
  Terminal terminal = Terminal::RouteTimeout;
  double route_completion = 0.0;  // percent
  double final_lateral = 0.0;
  double max_lateral = 0.0;
  std::size_t collisions = 0;
  std::size_t attacks = 0;
};

// Replaces a clean frame with an adversarial one. Receives the step index.
using FrameAttack = std::function<Tensor(const Tensor& frame, std::size_t step)>;

// Maps a frame and command to ego-frame waypoints; normally the victim.
using Planner = std::function<Trajectory(const Tensor& frame, Command command)>;
Planner victim_planner(const VictimModel& victim);

struct EpisodeOptions {
  VehicleParams vehicle;
  std::size_t inject_every = 10;  // frames inject_every, 2*inject_every, ...
  std::size_t lookahead_index = 3;  // waypoint used by pure pursuit
  Camera camera;
};

Command route_command(const RouteSpec& route, double s);

EpisodeLog run_episode(const RouteSpec& route, const Planner& planner, const FrameAttack& attack = {},
                       const EpisodeOptions& opts = {});

struct InfractionSummary {
  std::size_t episodes = 0;
  double route_completion = 0.0;
  double rates[kTerminalCount] = {};  // percent of episodes per terminal reason
  double mean_collisions = 0.0;

  double rate(Terminal t) const { return rates[static_cast<std::size_t>(t)]; }
};

InfractionSummary infraction_summary(const std::vector<EpisodeLog>& logs);

// One JSON object per step, then a terminal record.
void write_episode_log(const std::filesystem::path& path, const EpisodeLog& log);
// Columns: method,RC,OffRoad,Collisions,RouteDev,Blocked,ScenarioTimeout,RouteTimeout
void write_closedloop_csv(const std::filesystem::path& path,
                          const std::vector<std::pair<std::string, InfractionSummary>>& rows);

}  // namespace afm
