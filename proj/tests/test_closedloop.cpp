#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numbers>

#include "afm/closedloop.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace afm;

namespace {

// Fixed plans ignore the frame; they stand in for a victim with known behaviour.
Planner fixed_plan(double lateral_per_m, double length_scale = 1.0) {
  return [=](const Tensor&, Command) {
    Trajectory t;
    for (int i = 1; i <= 8; ++i) t.push_back({length_scale * i, lateral_per_m * i * i});
    return t;
  };
}

EpisodeLog log_with(Terminal t, double rc, std::size_t collisions = 0) {
  EpisodeLog l;
  l.terminal = t;
  l.route_completion = rc;
  l.collisions = collisions;
  return l;
}

}  // namespace

TEST_CASE("bicycle: unforced straight motion and speed clamp") {
  const VehicleState s{1.0, 2.0, 0.3, 4.0};
  const VehicleState n = bicycle_step(s, 0.0, 0.0, 0.1);
  CHECK(n.x == doctest::Approx(1.0 + 0.4 * std::cos(0.3)).epsilon(1e-14));
  CHECK(n.y == doctest::Approx(2.0 + 0.4 * std::sin(0.3)).epsilon(1e-14));
  CHECK(n.heading == 0.3);
  CHECK(n.speed == 4.0);
  CHECK(bicycle_step(s, 0.0, -100.0, 0.1).speed == 0.0);
  CHECK_THROWS_AS(bicycle_step(s, 0.6, 0.0, 0.1), std::invalid_argument);
  CHECK_THROWS_AS(bicycle_step(s, 0.1, 0.0, 0.0), std::invalid_argument);
}

TEST_CASE("bicycle: mirror symmetry about the heading axis") {
  const VehicleState s{0.0, 0.0, 0.0, 5.0};
  VehicleState l = s, r = s;
  for (int k = 0; k < 40; ++k) {
    l = bicycle_step(l, 0.2, 0.5, 0.1);
    r = bicycle_step(r, -0.2, 0.5, 0.1);
  }
  CHECK(l.x == doctest::Approx(r.x).epsilon(1e-12));
  CHECK(l.y == doctest::Approx(-r.y).epsilon(1e-12));
  CHECK(l.heading == doctest::Approx(-r.heading).epsilon(1e-12));
}

TEST_CASE("bicycle: constant steer traces the closed-form circle") {
  const double steer = 0.3, wb = 2.5, dt = 0.01;
  const double radius = wb / std::tan(steer);
  const std::size_t steps = 1000;
  // Speed chosen so that one revolution takes exactly `steps` steps.
  const double v = 2 * std::numbers::pi * radius / (steps * dt);
  VehicleState s{3.0, -1.0, 0.7, v};
  double worst = 0.0;
  for (std::size_t k = 1; k <= steps; ++k) {
    s = bicycle_step(s, steer, 0.0, dt, wb);
    // Centre of the circle sits radius to the left of the start heading.
    const double cx = 3.0 - radius * std::sin(0.7), cy = -1.0 + radius * std::cos(0.7);
    worst = std::max(worst, std::abs(std::hypot(s.x - cx, s.y - cy) - radius));
    CHECK(s.heading > -std::numbers::pi);
    CHECK(s.heading <= std::numbers::pi);
  }
  CHECK(std::hypot(s.x - 3.0, s.y + 1.0) < 1e-3);
  CHECK(worst < 1e-9);
}

TEST_CASE("routes are fixed-seed and well formed") {
  const auto routes = make_routes();
  REQUIRE(routes.size() == 10);
  CHECK(routes[0].obstacles.empty());
  CHECK(routes[0].half_width == 1.5);
  for (const auto& r : routes) {
    CHECK(r.half_width > 0.0);
    CHECK(r.length > 0.0);
    CHECK(r.centerline.length() >= r.length);
    CHECK(r.max_steps > 0);
  }
  const auto again = make_routes();
  for (std::size_t i = 0; i < routes.size(); ++i) {
    CHECK(routes[i].length == again[i].length);
    CHECK(routes[i].obstacles.size() == again[i].obstacles.size());
  }
  CHECK(route_command(routes[0], 10.0) == Command::Follow);
}

TEST_CASE("episodes terminate with the expected reason") {
  const RouteSpec road = straight_route(40.0, 1.5);

  const EpisodeLog straight = run_episode(road, fixed_plan(0.0));
  CHECK(straight.terminal == Terminal::Completed);
  CHECK(straight.route_completion == 100.0);
  CHECK(straight.max_lateral <= road.half_width);

  const EpisodeLog veer = run_episode(road, fixed_plan(0.05));
  CHECK(veer.terminal == Terminal::OffRoad);
  CHECK(veer.final_lateral > road.half_width);
  CHECK(veer.route_completion < 100.0);

  const EpisodeLog stall = run_episode(road, fixed_plan(0.0, 0.01));
  CHECK(stall.terminal == Terminal::Blocked);

  RouteSpec tolerant = road;
  tolerant.offroad_patience = 1000;
  const EpisodeLog away = run_episode(tolerant, fixed_plan(0.05));
  CHECK(away.terminal == Terminal::RouteDeviation);
  CHECK(away.final_lateral > 3.0 * road.half_width);

  RouteSpec short_budget = road;
  short_budget.max_steps = 10;
  CHECK(run_episode(short_budget, fixed_plan(0.0)).terminal == Terminal::RouteTimeout);

  RouteSpec timed = road;
  timed.scenarios.push_back({5.0, 30.0, 10});
  CHECK(run_episode(timed, fixed_plan(0.0)).terminal == Terminal::ScenarioTimeout);

  RouteSpec blocked_lane = road;
  blocked_lane.obstacles.push_back({{20.0, 0.0, 0.0}, 2.0, 1.5, 1.5, 0});
  const EpisodeLog crash = run_episode(blocked_lane, fixed_plan(0.0));
  CHECK(crash.terminal == Terminal::Collision);
  CHECK(crash.collisions == 1);
}

TEST_CASE("attack injection schedule and no-injection equivalence") {
  const RouteSpec road = straight_route(30.0, 1.5);
  std::vector<std::size_t> hit;
  const FrameAttack blackout = [&](const Tensor& frame, std::size_t step) {
    hit.push_back(step);
    return Tensor::zeros(frame.shape());
  };
  const EpisodeLog clean = run_episode(road, fixed_plan(0.0));
  EpisodeOptions never;
  never.inject_every = std::numeric_limits<std::size_t>::max();
  const EpisodeLog idle = run_episode(road, fixed_plan(0.0), blackout, never);
  CHECK(hit.empty());
  REQUIRE(idle.steps.size() == clean.steps.size());
  for (std::size_t k = 0; k < clean.steps.size(); ++k) {
    CHECK(idle.steps[k].frame_hash == clean.steps[k].frame_hash);
    CHECK(idle.steps[k].state.x == clean.steps[k].state.x);
    CHECK_FALSE(idle.steps[k].attacked);
  }
  CHECK(idle.terminal == clean.terminal);

  const EpisodeLog attacked = run_episode(road, fixed_plan(0.0), blackout);
  REQUIRE(hit.size() >= 3);
  for (std::size_t k = 0; k < hit.size(); ++k) CHECK(hit[k] == 10 * (k + 1));
  CHECK(attacked.attacks == hit.size());
  CHECK(attacked.steps[10].attacked);
  CHECK_FALSE(attacked.steps[11].attacked);

  EpisodeOptions bad;
  bad.inject_every = 0;
  CHECK_THROWS_AS(run_episode(road, fixed_plan(0.0), blackout, bad), std::invalid_argument);
  CHECK_THROWS_AS(run_episode(road, Planner{}), std::invalid_argument);
}

TEST_CASE("infraction summary") {
  const InfractionSummary all = infraction_summary(std::vector<EpisodeLog>(5, log_with(Terminal::Completed, 100.0)));
  CHECK(all.route_completion == 100.0);
  for (std::size_t k = 1; k < kTerminalCount; ++k) CHECK(all.rates[k] == 0.0);

  std::vector<EpisodeLog> logs(8, log_with(Terminal::Completed, 100.0));
  logs.push_back(log_with(Terminal::OffRoad, 40.0));
  logs.push_back(log_with(Terminal::OffRoad, 60.0));
  const InfractionSummary s = infraction_summary(logs);
  CHECK(s.rate(Terminal::OffRoad) == doctest::Approx(20.0));
  CHECK(s.route_completion == doctest::Approx(90.0));

  logs.push_back(log_with(Terminal::Collision, 10.0, 1));
  logs.push_back(log_with(Terminal::Blocked, 5.0));
  const InfractionSummary mix = infraction_summary(logs);
  double total = 0.0;
  for (double r : mix.rates) total += r;
  CHECK(total == doctest::Approx(100.0));
  CHECK(mix.mean_collisions == doctest::Approx(1.0 / 12));
  CHECK_THROWS_AS(infraction_summary({}), std::invalid_argument);
}

TEST_CASE("episode logs and the summary table") {
  const RouteSpec road = straight_route(20.0, 1.5);
  const EpisodeLog log = run_episode(road, fixed_plan(0.0));
  const auto dir = std::filesystem::temp_directory_path() / "afm_test_closedloop";
  std::filesystem::remove_all(dir);
  write_episode_log(dir / "episode.jsonl", log);
  std::ifstream is(dir / "episode.jsonl");
  std::string line, last;
  std::size_t lines = 0;
  while (std::getline(is, line)) {
    last = line;
    ++lines;
  }
  CHECK(lines == log.steps.size() + 1);
  const auto terminal = nlohmann::json::parse(last);
  CHECK(terminal["terminal"] == "completed");

  write_closedloop_csv(dir / "closedloop.csv", {{"clean", infraction_summary({log})}});
  std::ifstream cs(dir / "closedloop.csv");
  std::getline(cs, line);
  CHECK(line == "method,RC,OffRoad,Collisions,RouteDev,Blocked,ScenarioTimeout,RouteTimeout");
  std::getline(cs, line);
  CHECK(line == "clean,100.00,0.00,0.00,0.00,0.00,0.00,0.00");
}
